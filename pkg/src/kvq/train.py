"""Training loop: minibatch Adam on PLCC + rank + local-perception losses."""

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kvqt
from . import tensor as T
from .config import RunConfig
from .data import SampleSpec, SynthConfig, SyntheticClip, read_dataset, resize_frames, sample_frames, synth_dataset
from .errors import KVQError
from .losses import plcc_loss, rank_loss, total_loss
from .lpc import lpc_loss, patchwise_texture, slice_patches
from .metrics import plcc, srcc
from .model import KVQModel
from .optim import Adam
from .tensor import Tensor


class NumericalAbort(KVQError):
    """A loss or gradient became non-finite."""


def prepare_video(video: np.ndarray, input_size: Sequence[int], seed: int = 0) -> np.ndarray:
    """Bring ``[T, H, W, 3]`` to the model input size by segment sampling and bilinear resize."""
    video = np.asarray(video, dtype=np.float64)
    t, h, w = input_size
    if video.shape[0] != t:
        if video.shape[0] < t:
            reps = -(-t // video.shape[0])
            video = np.repeat(video, reps, axis=0)
        segments = math.gcd(t, 8)
        video = sample_frames(video, SampleSpec(num_frames=t, num_segments=segments, seed=seed))
    if video.shape[1:3] != (h, w):
        video = resize_frames(video, h, w)
    return video


def synth_config_for(cfg: RunConfig) -> SynthConfig:
    t, h, w = cfg.backbone.input_size
    return SynthConfig(frames=t, height=h, width=w, cell=cfg.backbone.output_stride, spread=cfg.spread)


def load_clips(cfg: RunConfig, path: str, count: int, seed: int) -> List[SyntheticClip]:
    """Read a clip directory, or synthesize ``count`` clips when ``path`` is empty."""
    if path:
        return read_dataset(path)
    return synth_dataset(count, seed, synth_config_for(cfg))


def stack_videos(clips: Sequence[SyntheticClip], cfg: RunConfig) -> np.ndarray:
    size = cfg.backbone.input_size
    return np.stack([prepare_video(c.video, size) for c in clips]).astype(cfg.np_dtype)


def predict(model: KVQModel, videos: np.ndarray, batch_size: int = 8) -> Dict[str, np.ndarray]:
    """Quality scores and maps for a stack of videos, without building a graph."""
    q, tex, sal, qhat = [], [], [], []
    with T.no_grad():
        for start in range(0, len(videos), batch_size):
            batch = videos[start:start + batch_size]
            out = model(batch)
            q.append(out.quality.data)
            tex.append(out.texture.data)
            sal.append(out.saliency.data)
            qhat.append(patchwise_texture(model, slice_patches(batch, model.cfg.output_stride)).data)
    return {
        "quality": np.concatenate(q).astype(np.float64),
        "texture": np.concatenate(tex).astype(np.float64),
        "saliency": np.concatenate(sal).astype(np.float64),
        "patch_texture": np.concatenate(qhat).astype(np.float64),
    }


def global_metrics(pred: np.ndarray, mos: np.ndarray) -> Dict[str, float]:
    return {"srcc": srcc(pred, mos), "plcc": plcc(pred, mos)}


@dataclass
class TrainResult:
    model: KVQModel
    log: List[Dict] = field(default_factory=list)
    final_metrics: Dict = field(default_factory=dict)


def shuffle_cells(clip: np.ndarray, cell: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Randomly permute the texture cells of one ``[T, H, W, 3]`` clip."""
    grid = slice_patches(clip, cell)
    perm = rng.permutation(len(grid.patches))
    return replace(grid, patches=grid.patches[perm]).assemble()[0]


def augment(batch: np.ndarray, rng: np.random.Generator, cell: Optional[Sequence[int]] = None,
            shuffle: float = 0.0) -> np.ndarray:
    """Per-clip random flips, time reversal and colour-channel permutation.

    Each transform permutes texture cells or colour channels without changing
    any cell's distortion, so the clip score is unchanged. With ``cell`` the
    cells are also shuffled across the grid with probability ``shuffle``; the
    score is a sum over cells, so this keeps it exact.
    """
    out = np.empty_like(batch)
    for n, clip in enumerate(batch):
        if rng.uniform() < 0.5:
            clip = clip[::-1]
        if rng.uniform() < 0.5:
            clip = clip[:, ::-1]
        if rng.uniform() < 0.5:
            clip = clip[:, :, ::-1]
        if cell is not None and rng.uniform() < shuffle:
            clip = shuffle_cells(clip, cell, rng)
        out[n] = clip[..., rng.permutation(clip.shape[-1])]
    return out


def _finite(name: str, value: float, step: int) -> float:
    if not np.isfinite(value):
        raise NumericalAbort(f"{name} is {value} at step {step}")
    return float(value)


SALIENCY_PREFIXES = ("saliency.", "ensemble.")


def lr_scales(model: KVQModel, cfg: RunConfig, step: int) -> List[float]:
    """Per-parameter step multipliers; saliency parameters wait out the warmup."""
    sal = 0.0 if step <= cfg.saliency_warmup else cfg.saliency_lr_scale
    return [sal if name.startswith(SALIENCY_PREFIXES) else 1.0 for name in model.parameter_names()]


def train_step(model: KVQModel, opt: Adam, batch: np.ndarray, mos: np.ndarray, cfg: RunConfig, use_lpc: bool):
    """One optimizer step; returns the logged loss components."""
    out = model(batch)
    l_plcc = plcc_loss(out.quality, mos)
    l_rank = rank_loss(out.quality, mos)
    l_lpc = None
    weighted_lpc = Tensor(np.zeros(()), dtype=out.quality.dtype)
    if use_lpc:
        grid = slice_patches(batch, model.cfg.output_stride)
        if cfg.weights.lpc > 0:
            texture = out.texture
            if cfg.freeze_patch_branch:
                with T.no_grad():
                    patch = patchwise_texture(model, grid).detach()
            else:
                patch = patchwise_texture(model, grid)
            l_lpc = lpc_loss(texture, patch)
            weighted_lpc = l_lpc
        else:
            with T.no_grad():
                l_lpc = lpc_loss(out.texture.detach(), patchwise_texture(model, grid))
    total = total_loss(l_plcc, l_rank, weighted_lpc, cfg.weights)
    step = opt.t + 1
    entry = {
        "step": step,
        "plcc_loss": _finite("plcc_loss", l_plcc.item(), step),
        "rank_loss": _finite("rank_loss", l_rank.item(), step),
        "lpc_loss": None if l_lpc is None else _finite("lpc_loss", l_lpc.item(), step),
        "total": _finite("total", total.item(), step),
    }
    params = model.parameters()
    grads = T.grad(total, params)
    for name, g in zip(model.parameter_names(), grads):
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name} at step {step}")
    opt.step(grads, lr_scales(model, cfg, step))
    return entry


def train(
    cfg: RunConfig,
    clips: Optional[Sequence[SyntheticClip]] = None,
    log_path: Optional[str] = None,
) -> TrainResult:
    """Train from ``cfg``; every log line carries the config hash and seed."""
    if clips is None:
        clips = load_clips(cfg, cfg.train_data, cfg.train_clips, cfg.synth_seed)
    if len(clips) < 2:
        raise KVQError("training needs at least two clips")
    tag = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    with T.default_dtype(cfg.np_dtype):
        model = KVQModel.init(cfg.backbone, seed=cfg.seed, dtype=cfg.np_dtype)
        videos = stack_videos(clips, cfg)
        mos = np.array([c.global_mos for c in clips], dtype=np.float64)
        opt = Adam(model.parameters(), lr=cfg.lr)
        rng = np.random.default_rng([cfg.seed, 1])
        result = TrainResult(model)
        log_fh = open(log_path, "w") if log_path else None
        try:
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(clips))
                for start in range(0, len(order) - 1, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    if len(idx) < 2:
                        continue
                    use_lpc = rng.uniform() < cfg.lpc_fraction
                    batch = videos[idx]
                    if cfg.augment:
                        batch = augment(batch, rng, model.cfg.output_stride, cfg.shuffle_cells)
                    entry = train_step(model, opt, batch, mos[idx], cfg, use_lpc)
                    entry = dict(entry, epoch=epoch, **tag)
                    result.log.append(entry)
                    if log_fh:
                        log_fh.write(json.dumps(entry) + "\n")
                        log_fh.flush()
        finally:
            if log_fh:
                log_fh.close()
        preds = predict(model, videos, cfg.batch_size)
    result.final_metrics = dict(global_metrics(preds["quality"], mos), steps=opt.t, **tag)
    return result


def save_model(model: KVQModel, path: str, cfg: RunConfig) -> None:
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "dtype": cfg.dtype}
    meta.update({f"cfg.{k}": v for k, v in cfg.raw.items()})
    kvqt.save_checkpoint(path, model.state_dict(), meta)


def load_model(path: str, cfg: RunConfig) -> KVQModel:
    params, _ = kvqt.load_checkpoint(path)
    model = KVQModel.init(cfg.backbone, seed=0, dtype=cfg.np_dtype)
    model.load_state_dict({k: v.astype(cfg.np_dtype) for k, v in params.items()})
    return model


def config_from_checkpoint(path: str) -> RunConfig:
    """Rebuild the run configuration stored in a checkpoint manifest."""
    _, meta = kvqt.load_checkpoint(path)
    raw = {k[len("cfg."):]: v for k, v in meta.items() if k.startswith("cfg.")}
    return RunConfig.from_mapping(raw)


def write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
