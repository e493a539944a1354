"""Scaled-down video transformer trunk.

Patch embedding, then stages of pre-norm residual blocks whose attention
is fusion-window attention. Stages after the first start with a 2x2 spatial
patch merge. There is no shifted-window step and no positional encoding.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .fwa import CorrelationBundle, fwa_forward, init_fwa_params
from .tensor import Tensor

Params = Dict[str, Tensor]

# pixels in [0, 1] are centred and scaled before embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _triple(value, name) -> Tuple[int, int, int]:
    value = tuple(int(v) for v in value)
    if len(value) != 3 or any(v <= 0 for v in value):
        raise ConfigError(f"{name} must be three positive ints, got {value}")
    return value


@dataclass(frozen=True)
class BackboneConfig:
    """Trunk geometry. Validated against ``input_size`` on construction."""

    patch_size: Tuple[int, int, int] = (2, 4, 4)
    channels: Tuple[int, ...] = (32, 64)
    depths: Tuple[int, ...] = (2, 2)
    heads: Tuple[int, ...] = (2, 4)
    window_size: Tuple[int, int, int] = (2, 2, 2)
    top_k: int = 2
    mlp_ratio: int = 4
    input_size: Tuple[int, int, int] = (16, 64, 64)
    in_chans: int = 3

    def __post_init__(self):
        for name in ("patch_size", "window_size", "input_size"):
            object.__setattr__(self, name, _triple(getattr(self, name), name))
        for name in ("channels", "depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.channels) == len(self.depths) == len(self.heads)) or not self.channels:
            raise ConfigError("channels, depths and heads need one entry per stage")
        if any(d < 0 for d in self.depths):
            raise ConfigError("depths must be non-negative")
        for c, h in zip(self.channels, self.heads):
            if h <= 0 or c % h:
                raise ConfigError(f"channels {c} not divisible by heads {h}")
        if self.top_k < 0:
            raise ConfigError("top_k must be non-negative")
        self.validate_input(self.input_size)

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)

    @property
    def output_stride(self) -> Tuple[int, int, int]:
        scale = 2 ** (self.num_stages - 1)
        pt, ph, pw = self.patch_size
        return (pt, ph * scale, pw * scale)

    def stage_grids(self, input_size: Sequence[int]) -> List[Tuple[int, int, int]]:
        tv, hv, wv = input_size
        pt, ph, pw = self.patch_size
        if tv % pt or hv % ph or wv % pw:
            raise DimensionError(f"input {tuple(input_size)} not divisible by patch size {self.patch_size}")
        grid = (tv // pt, hv // ph, wv // pw)
        grids = [grid]
        for _ in range(1, self.num_stages):
            t, h, w = grids[-1]
            if h % 2 or w % 2:
                raise DimensionError(f"stage grid {grids[-1]} cannot be 2x2 merged")
            grids.append((t, h // 2, w // 2))
        return grids

    def validate_input(self, input_size: Sequence[int]) -> None:
        """Raise unless blocks at every stage can run on clips of ``input_size``."""
        try:
            grids = self.stage_grids(input_size)
        except DimensionError as exc:
            raise ConfigError(str(exc)) from exc
        for stage, (grid, depth) in enumerate(zip(grids, self.depths)):
            if depth == 0:
                continue
            if any(g % w for g, w in zip(grid, self.window_size)):
                raise ConfigError(f"window {self.window_size} does not divide stage {stage} grid {grid}")
            n_w = int(np.prod([g // w for g, w in zip(grid, self.window_size)]))
            if self.top_k >= n_w:
                raise ConfigError(f"top_k={self.top_k} must be below the {n_w} windows of stage {stage}")

    def output_grid(self, input_size: Sequence[int]) -> Tuple[int, int, int]:
        return self.stage_grids(input_size)[-1]


def _weight(rng, shape, dtype, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def init_block_params(channels: int, mlp_ratio: int, rng: np.random.Generator, dtype) -> Params:
    hidden = channels * mlp_ratio
    params = {
        "norm1.gamma": _ones(channels, dtype),
        "norm1.beta": _zeros(channels, dtype),
        "norm2.gamma": _ones(channels, dtype),
        "norm2.beta": _zeros(channels, dtype),
        "mlp.fc1.weight": _weight(rng, (channels, hidden), dtype),
        "mlp.fc1.bias": _zeros(hidden, dtype),
        "mlp.fc2.weight": _weight(rng, (hidden, channels), dtype),
        "mlp.fc2.bias": _zeros(channels, dtype),
    }
    for name, value in init_fwa_params(channels, rng, dtype=dtype).items():
        params[f"attn.{name}"] = value
    return params


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator, dtype=None) -> Params:
    dtype = dtype or T.get_default_dtype()
    pt, ph, pw = cfg.patch_size
    params: Params = {
        "embed.weight": _weight(rng, (cfg.in_chans * pt * ph * pw, cfg.channels[0]), dtype),
        "embed.bias": _zeros(cfg.channels[0], dtype),
    }
    for s, (c, depth) in enumerate(zip(cfg.channels, cfg.depths)):
        if s > 0:
            prev = cfg.channels[s - 1]
            params[f"stages.{s}.merge.norm.gamma"] = _ones(4 * prev, dtype)
            params[f"stages.{s}.merge.norm.beta"] = _zeros(4 * prev, dtype)
            params[f"stages.{s}.merge.reduction.weight"] = _weight(rng, (4 * prev, c), dtype)
        for b in range(depth):
            for name, value in init_block_params(c, cfg.mlp_ratio, rng, dtype).items():
                params[f"stages.{s}.blocks.{b}.{name}"] = value
    return params


def subparams(params: Params, prefix: str) -> Params:
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def patch_embed(video, params: Params, cfg: BackboneConfig) -> Tensor:
    """``[B, T_v, H_v, W_v, 3]`` video to ``[B, T, H, W, C]`` patch features.

    Pixels are first mapped to ``(v - 0.5) / 0.25``; each cell then projects
    its voxel block flattened in (t, h, w, channel) order.
    """
    video = T.as_tensor(video, like=params["embed.weight"])
    if video.ndim != 5 or video.shape[-1] != cfg.in_chans:
        raise DimensionError(f"expected [B, T, H, W, {cfg.in_chans}] video, got {video.shape}")
    b, tv, hv, wv, ch = video.shape
    pt, ph, pw = cfg.patch_size
    if tv % pt or hv % ph or wv % pw:
        raise DimensionError(f"video {video.shape[1:4]} not divisible by patch size {cfg.patch_size}")
    t, h, w = tv // pt, hv // ph, wv // pw
    split = T.reshape(video, (b, t, pt, h, ph, w, pw, ch))
    cells = T.reshape(T.transpose(split, (0, 1, 3, 5, 2, 4, 6, 7)), (b, t, h, w, pt * ph * pw * ch))
    cells = (cells - PIXEL_MEAN) * (1.0 / PIXEL_STD)
    return T.linear(cells, params["embed.weight"], params["embed.bias"])


def patch_merge(x: Tensor, params: Params) -> Tensor:
    """2x2 spatial merge: concatenate neighbours (4C), normalize, project."""
    b, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"cannot 2x2 merge grid {(t, h, w)}")
    split = T.reshape(x, (b, t, h // 2, 2, w // 2, 2, c))
    merged = T.reshape(T.transpose(split, (0, 1, 2, 4, 3, 5, 6)), (b, t, h // 2, w // 2, 4 * c))
    normed = T.layer_norm(merged, params["norm.gamma"], params["norm.beta"])
    return T.linear(normed, params["reduction.weight"])


def block_forward(
    x: Tensor,
    params: Params,
    window: Sequence[int],
    top_k: int,
    heads: int,
    clamp: bool = False,
) -> Tuple[Tensor, CorrelationBundle]:
    """Pre-norm residual block: ``x + FWA(LN x)``, then ``+ FFN(LN .)``."""
    if x.ndim != 5 or x.shape[-1] != params["norm1.gamma"].shape[0]:
        raise DimensionError(f"block expects [B, T, H, W, {params['norm1.gamma'].shape[0]}], got {x.shape}")
    attn = subparams(params, "attn")
    h = T.layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    mixed, bundle = fwa_forward(h, attn, window, top_k, heads, clamp=clamp)
    x = x + mixed
    h = T.layer_norm(x, params["norm2.gamma"], params["norm2.beta"])
    h = T.gelu(T.linear(h, params["mlp.fc1.weight"], params["mlp.fc1.bias"]))
    x = x + T.linear(h, params["mlp.fc2.weight"], params["mlp.fc2.bias"])
    return x, bundle


def backbone_forward(
    video,
    params: Params,
    cfg: BackboneConfig,
    clamp: bool = False,
) -> Tuple[Tensor, List[CorrelationBundle]]:
    """Embed then run all stages; one correlation bundle per block, in order."""
    x = patch_embed(video, params, cfg)
    bundles: List[CorrelationBundle] = []
    for s, depth in enumerate(cfg.depths):
        if s > 0:
            x = patch_merge(x, subparams(params, f"stages.{s}.merge"))
        for b in range(depth):
            block = subparams(params, f"stages.{s}.blocks.{b}")
            x, bundle = block_forward(x, block, cfg.window_size, cfg.top_k, cfg.heads[s], clamp=clamp)
            bundles.append(bundle)
    return x, bundles
