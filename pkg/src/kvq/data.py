"""Frame sampling, resizing, image replication and synthetic distorted clips.

Synthetic clips carry their own region-wise ground truth: every texture cell
gets a severity in [0, 1] that drives blur (sigma = 3*s px), value
quantization (round(16 - 12*s) levels) and additive Gaussian noise
(std = 0.1*s). Local quality is ``1 - s``; the clip MOS is the mean of
local quality weighted by a mean-one contrast saliency proxy.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kvqt
from .errors import ConfigError, ContractError, DimensionError
from .lpvq import GRID, AnnotationRecord
from .tensor import interp_matrix

LUMA = np.array([0.299, 0.587, 0.114])


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("KVQ_THREADS", "1")))
    except ValueError:
        return 1


# -- sampling and resizing ------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    num_frames: int = 32
    num_segments: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_frames <= 0 or self.num_segments <= 0 or self.num_frames % self.num_segments:
            raise ConfigError(f"num_frames={self.num_frames} must be a positive multiple of num_segments={self.num_segments}")


def segment_bounds(length: int, num_segments: int) -> np.ndarray:
    return np.floor(np.linspace(0, length, num_segments + 1)).astype(np.int64)


def sample_indices(length: int, spec: SampleSpec) -> np.ndarray:
    """Strictly increasing frame indices, ``num_frames / num_segments`` per equal segment."""
    if length < spec.num_frames:
        raise ContractError(f"video has {length} frames, need at least {spec.num_frames}")
    per = spec.num_frames // spec.num_segments
    rng = np.random.default_rng(spec.seed)
    bounds = segment_bounds(length, spec.num_segments)
    picks = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        picks.append(np.sort(rng.choice(np.arange(lo, hi), size=per, replace=False)))
    return np.concatenate(picks)


def sample_frames(video, spec: SampleSpec) -> np.ndarray:
    video = np.asarray(video)
    return video[sample_indices(video.shape[0], spec)]


def resize_frames(video, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear (align-corners) resize of every frame of ``[T, H, W, C]``; aspect is not kept."""
    video = np.asarray(video, dtype=np.float64)
    if target_h <= 0 or target_w <= 0:
        raise DimensionError(f"target size must be positive, got {(target_h, target_w)}")
    rows = interp_matrix(video.shape[1], target_h)
    cols = interp_matrix(video.shape[2], target_w)
    return np.einsum("ih,thwc,jw->tijc", rows, video, cols)


def replicate_image(image, frames: int = 16) -> np.ndarray:
    """Stack ``frames`` identical copies of an ``[H, W, C]`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected [H, W, C] image, got {image.shape}")
    return np.repeat(image[None], frames, axis=0)


# -- synthetic content ------------------------------------------------------------

def base_content(rng: np.random.Generator, frames: int, height: int, width: int) -> np.ndarray:
    """Procedural clip in [0, 1]: colour gradient, drifting gratings, moving shapes."""
    t = np.arange(frames)[:, None, None]
    y = np.arange(height)[None, :, None] / height
    x = np.arange(width)[None, None, :] / width
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * x + np.sin(angle) * y
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    video = c0 + (c1 - c0) * ramp[..., None] * np.ones((frames, 1, 1, 1))

    for _ in range(rng.integers(2, 4)):
        freq = rng.uniform(2.0, 7.0)
        theta = rng.uniform(0, np.pi)
        speed = rng.uniform(-0.3, 0.3)
        amp = rng.uniform(0.06, 0.15)
        phase = 2 * np.pi * (freq * (np.cos(theta) * x + np.sin(theta) * y) + speed * t)
        video = video + amp * np.sin(phase)[..., None] * rng.uniform(0.5, 1.0, 3)

    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        vy, vx = rng.uniform(-0.02, 0.02, 2)
        radius = rng.uniform(0.08, 0.2)
        colour = rng.uniform(0, 1, 3)
        for f in range(frames):
            mask = (y[0] - (cy + vy * f)) ** 2 + (x[0] - (cx + vx * f)) ** 2 < radius ** 2
            video[f][mask] = 0.5 * video[f][mask] + 0.5 * colour

    return np.clip(video, 0.0, 1.0)


def blur_region(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur of ``[T, H, W, C]``; borders replicate."""
    if sigma <= 0:
        return frames.copy()
    return gaussian_filter(frames, sigma=(0, sigma, sigma, 0), mode="nearest")


def quantize(values: np.ndarray, levels: int) -> np.ndarray:
    levels = max(2, int(levels))
    return np.round(values * (levels - 1)) / (levels - 1)


def quantization_levels(severity: float) -> int:
    return int(round(16 - 12 * severity))


def distort_cells(clean: np.ndarray, severity: np.ndarray, cell: Sequence[int], seed) -> np.ndarray:
    """Apply blur, quantization and noise cell by cell according to ``severity``.

    Blur reads a margin around the cell from the clean clip; noise for cell
    ``n`` (raster order) comes from its own generator seeded with
    ``(seed..., n)``, so a cell's pixels depend only on its content and severity.
    """
    st, sh, sw = cell
    nt, nh, nw = severity.shape
    out = clean.copy()
    seed = list(np.atleast_1d(seed).astype(np.int64))
    _, height, width, _ = clean.shape
    for n, (i, j, k) in enumerate(np.ndindex(nt, nh, nw)):
        s = float(severity[i, j, k])
        if s <= 0:
            continue
        sigma = 3.0 * s
        margin = int(np.ceil(3 * sigma)) + 1
        t0, t1 = i * st, (i + 1) * st
        y0, y1 = j * sh, (j + 1) * sh
        x0, x1 = k * sw, (k + 1) * sw
        ya, yb = max(0, y0 - margin), min(height, y1 + margin)
        xa, xb = max(0, x0 - margin), min(width, x1 + margin)
        region = blur_region(clean[t0:t1, ya:yb, xa:xb], sigma)[:, y0 - ya:y1 - ya, x0 - xa:x1 - xa]
        region = quantize(region, quantization_levels(s))
        noise_rng = np.random.default_rng(seed + [n])
        region = region + noise_rng.normal(0.0, 0.1 * s, region.shape)
        out[t0:t1, y0:y1, x0:x1] = np.clip(region, 0.0, 1.0)
    return out


def contrast_saliency(clean: np.ndarray, cell: Sequence[int]) -> np.ndarray:
    """Per-cell luminance contrast, smoothed over the cell grid, normalized to mean one."""
    st, sh, sw = cell
    luma = clean @ LUMA
    t, h, w = luma.shape
    blocks = luma.reshape(t // st, st, h // sh, sh, w // sw, sw)
    contrast = blocks.std(axis=(1, 3, 5))
    smooth = gaussian_filter(contrast, sigma=1.0, mode="nearest")
    smooth = smooth + 0.05 * smooth.mean() + 1e-6
    return smooth / smooth.mean()


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 16
    height: int = 64
    width: int = 64
    cell: Tuple[int, int, int] = (2, 8, 8)
    spread: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "cell", tuple(int(c) for c in self.cell))
        dims = (self.frames, self.height, self.width)
        if any(d % c for d, c in zip(dims, self.cell)):
            raise ConfigError(f"clip size {dims} not divisible by cell {self.cell}")

    @property
    def grid(self) -> Tuple[int, int, int]:
        return (self.frames // self.cell[0], self.height // self.cell[1], self.width // self.cell[2])


@dataclass
class SyntheticClip:
    video: np.ndarray
    local_quality: np.ndarray
    saliency: np.ndarray
    global_mos: float
    severity: np.ndarray
    seed: Tuple[int, ...] = ()
    meta: Dict = field(default_factory=dict)


def draw_severity(rng: np.random.Generator, grid: Sequence[int], spread: float) -> np.ndarray:
    level = rng.uniform(0.0, 1.0)
    return np.clip(level + spread * rng.normal(0.0, 1.0, grid), 0.0, 1.0)


def synth_clip(seed, cfg: SynthConfig = SynthConfig(), severity: Optional[np.ndarray] = None) -> SyntheticClip:
    """Generate one clip; ``severity`` overrides the drawn per-cell severities."""
    seed = tuple(int(s) for s in np.atleast_1d(seed))
    rng = np.random.default_rng(list(seed))
    clean = base_content(rng, cfg.frames, cfg.height, cfg.width)
    drawn = draw_severity(rng, cfg.grid, cfg.spread)
    severity = drawn if severity is None else np.asarray(severity, dtype=np.float64)
    if severity.shape != cfg.grid:
        raise DimensionError(f"severity map {severity.shape} does not match grid {cfg.grid}")
    video = distort_cells(clean, severity, cfg.cell, seed)
    local_quality = 1.0 - severity
    saliency = contrast_saliency(clean, cfg.cell)
    mos = float(np.mean(saliency * local_quality))
    return SyntheticClip(video, local_quality, saliency, mos, severity, seed)


def synth_dataset(n: int, seed: int, cfg: SynthConfig = SynthConfig(), threads: Optional[int] = None) -> List[SyntheticClip]:
    """``n`` clips; clip ``i`` uses seed ``(seed, i)`` so the set is order-independent."""
    seeds = [(seed, i) for i in range(n)]
    workers = threads or num_threads()
    if workers <= 1:
        return [synth_clip(s, cfg) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: synth_clip(s, cfg), seeds))


# -- dataset directories -------------------------------------------------------------

def write_dataset(directory, clips: Sequence[SyntheticClip]) -> None:
    """``clip_####/{video,local_quality,saliency}.kvqt`` plus ``meta.jsonl``."""
    os.makedirs(directory, exist_ok=True)
    for i, clip in enumerate(clips):
        sub = os.path.join(directory, f"clip_{i:04d}")
        os.makedirs(sub, exist_ok=True)
        kvqt.save(os.path.join(sub, "video.kvqt"), clip.video)
        if clip.local_quality is not None:
            kvqt.save(os.path.join(sub, "local_quality.kvqt"), clip.local_quality)
        if clip.saliency is not None:
            kvqt.save(os.path.join(sub, "saliency.kvqt"), clip.saliency)
        meta = dict(clip.meta, id=f"clip_{i:04d}", mos=clip.global_mos, seed=list(clip.seed))
        with open(os.path.join(sub, "meta.jsonl"), "w") as fh:
            fh.write(json.dumps(meta) + "\n")


def read_dataset(directory) -> List[SyntheticClip]:
    """Load a clip directory; region and saliency maps are optional per clip."""
    clips = []
    for name in sorted(os.listdir(directory)):
        sub = os.path.join(directory, name)
        if not (name.startswith("clip_") and os.path.isdir(sub)):
            continue
        with open(os.path.join(sub, "meta.jsonl")) as fh:
            meta = json.loads(fh.readline())

        def optional(fname):
            path = os.path.join(sub, fname)
            return kvqt.load(path) if os.path.exists(path) else None

        video = kvqt.load(os.path.join(sub, "video.kvqt"))
        lq = optional("local_quality.kvqt")
        clips.append(SyntheticClip(
            video=video,
            local_quality=lq,
            saliency=optional("saliency.kvqt"),
            global_mos=float(meta["mos"]),
            severity=None if lq is None else 1.0 - lq,
            seed=tuple(meta.get("seed", ())),
            meta=meta,
        ))
    return clips


# -- synthetic region-annotated images ------------------------------------------------

def synth_lpvq(
    num_images: int,
    seed: int,
    annotators: int = 14,
    image_size: int = 56,
    score_noise: float = 0.35,
):
    """Static images with per-cell distortions on the 7x7 grid plus simulated annotator scores.

    Returns ``(images, records, local_quality)``; ``images`` maps id to
    ``[H, W, 3]``, ``local_quality`` maps id to the 7x7 truth.
    """
    if image_size % GRID:
        raise ConfigError(f"image size {image_size} must be a multiple of {GRID}")
    cell = (1, image_size // GRID, image_size // GRID)
    images, quality, records = {}, {}, []
    for n in range(num_images):
        image_id = f"img_{n:03d}"
        rng = np.random.default_rng([seed, n])
        clean = base_content(rng, 1, image_size, image_size)
        severity = draw_severity(rng, (1, GRID, GRID), 0.3)
        images[image_id] = distort_cells(clean, severity, cell, (seed, n))[0]
        lq = 1.0 - severity[0]
        quality[image_id] = lq
        for a in range(annotators):
            raw = 1.0 + 4.0 * lq + rng.normal(0.0, score_noise, lq.shape)
            scores = np.clip(np.round(raw * 2) / 2, 1.0, 5.0)
            for r in range(GRID):
                for c in range(GRID):
                    records.append(AnnotationRecord(image_id, r, c, f"a{a:02d}", float(scores[r, c])))
    return images, records, quality


def write_lpvq_dataset(directory, images: Dict[str, np.ndarray], records: Sequence[AnnotationRecord]) -> None:
    from .lpvq import write_lpvq_csv

    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    for image_id, image in images.items():
        kvqt.save(os.path.join(directory, "images", f"{image_id}.kvqt"), image)
    write_lpvq_csv(os.path.join(directory, "lpvq.csv"), records)


def read_lpvq_dataset(directory):
    from .lpvq import load_lpvq_csv, image_ids

    records = load_lpvq_csv(os.path.join(directory, "lpvq.csv"))
    images = {i: kvqt.load(os.path.join(directory, "images", f"{i}.kvqt")) for i in image_ids(records)}
    return images, records
