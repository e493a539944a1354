"""Texture and saliency heads, multi-scale saliency ensemble, quality aggregation."""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .fwa import CorrelationBundle, patch_significance
from .tensor import Tensor


@dataclass
class QualityMaps:
    """Model outputs for a batch.

    ``saliency`` and ``texture`` are ``[B, T, H, W]``; ``quality`` is ``[B]``.
    ``saliency`` is nonnegative with mean one per clip.
    """

    saliency: Tensor
    texture: Tensor
    quality: Tensor
    saliency_logits: Tensor
    significance: List[Tensor] = field(default_factory=list)
    bundles: List[CorrelationBundle] = field(default_factory=list)


def init_head_params(channels: int, rng: np.random.Generator, dtype=None, std: float = 0.02) -> Dict[str, Tensor]:
    dtype = dtype or T.get_default_dtype()

    def w():
        return Tensor(rng.normal(0.0, std, size=(channels, 1)), requires_grad=True, dtype=dtype)

    return {
        "weight": w(),
        "bias": Tensor(np.zeros(1), requires_grad=True, dtype=dtype),
    }


def init_ensemble_weights(num_blocks: int, dtype=None) -> Tensor:
    """Learned-saliency weight starts at 1, per-block weights at 0."""
    w = np.zeros(num_blocks + 1)
    w[0] = 1.0
    return Tensor(w, requires_grad=True, dtype=dtype or T.get_default_dtype())


def _project(features: Tensor, params: Dict[str, Tensor], grid: Sequence[int] = None) -> Tensor:
    if features.ndim != 5:
        raise DimensionError(f"expected [B, T, H, W, C] features, got {features.shape}")
    out = T.linear(features, params["weight"], params["bias"])
    out = T.reshape(out, out.shape[:4])
    if grid is not None and tuple(grid) != out.shape[1:4]:
        out = T.resample3d(out, grid)
    return out


def texture_head(features: Tensor, params: Dict[str, Tensor], grid: Sequence[int] = None) -> Tensor:
    """Per-position linear map ``C -> 1``; returns the texture map ``[B, T, H, W]``."""
    return _project(features, params, grid)


def saliency_head(features: Tensor, params: Dict[str, Tensor], grid: Sequence[int] = None) -> Tensor:
    """Per-position linear map ``C -> 1``; returns saliency logits ``[B, T, H, W]``."""
    return _project(features, params, grid)


def to_common_grid(m: Tensor, grid: Sequence[int]) -> Tensor:
    """Resample ``[B, t, h, w]`` to the nearest integer multiple of ``grid``, then average-pool down."""
    grid = tuple(int(g) for g in grid)
    src = m.shape[1:4]
    factors = tuple(max(1, -(-s // g)) for s, g in zip(src, grid))
    upsampled = tuple(g * f for g, f in zip(grid, factors))
    if upsampled != src:
        m = T.resample3d(m, upsampled)
    if any(f > 1 for f in factors):
        m = T.avgpool(m, factors, (1, 2, 3))
    return m


def block_significance(bundles: Sequence[CorrelationBundle], grid: Sequence[int]) -> List[Tensor]:
    return [to_common_grid(patch_significance(b), grid) for b in bundles]


def ensemble_saliency(saliency_logits: Tensor, significance: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Global softmax of ``w0*logits + sum_l w_l*sig_l`` over each clip, rescaled to mean one."""
    if weights.shape != (len(significance) + 1,):
        raise DimensionError(f"need {len(significance) + 1} ensemble weights, got shape {weights.shape}")
    z = saliency_logits * weights[0]
    for l, sig in enumerate(significance, start=1):
        if sig.shape != saliency_logits.shape:
            raise DimensionError(f"significance map {sig.shape} does not match saliency grid {saliency_logits.shape}")
        z = z + sig * weights[l]
    b = z.shape[0]
    cells = int(np.prod(z.shape[1:]))
    s = T.softmax(T.reshape(z, (b, cells)), axis=-1) * float(cells)
    return T.reshape(s, z.shape)


def aggregate_quality(saliency: Tensor, texture: Tensor) -> Tensor:
    """Mean of ``saliency * texture`` over each clip's cells; returns ``[B]``."""
    if saliency.shape != texture.shape:
        raise DimensionError(f"saliency {saliency.shape} and texture {texture.shape} differ")
    return T.mean(saliency * texture, axis=tuple(range(1, saliency.ndim)))
