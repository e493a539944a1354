"""Local perception constraint.

The clip is cut into sub-videos, one per texture cell, each is run through
the same model on its own, and the reassembled map is compared with the
full-clip texture map by cosine distance.
"""

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import DegenerateInputWarning, DimensionError
from .tensor import Tensor

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class PatchGrid:
    """``patches`` is ``[B * nT * nH * nW, st, sh, sw, 3]`` in (b, i, j, k) raster order."""

    patches: np.ndarray
    batch: int
    grid: Tuple[int, int, int]
    stride: Tuple[int, int, int]

    def assemble(self) -> np.ndarray:
        """Reassemble the sliced video ``[B, T_v, H_v, W_v, 3]``."""
        nt, nh, nw = self.grid
        st, sh, sw = self.stride
        ch = self.patches.shape[-1]
        split = self.patches.reshape(self.batch, nt, nh, nw, st, sh, sw, ch)
        return split.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(self.batch, nt * st, nh * sh, nw * sw, ch)


def slice_patches(video: np.ndarray, stride) -> PatchGrid:
    """Tile ``[B, T_v, H_v, W_v, 3]`` (or unbatched) into non-overlapping stride-sized sub-videos."""
    video = np.asarray(video.data if isinstance(video, Tensor) else video)
    if video.ndim == 4:
        video = video[None]
    if video.ndim != 5:
        raise DimensionError(f"expected [B, T, H, W, 3] video, got {video.shape}")
    stride = tuple(int(s) for s in stride)
    b, tv, hv, wv, ch = video.shape
    st, sh, sw = stride
    if tv % st or hv % sh or wv % sw:
        raise DimensionError(f"video {(tv, hv, wv)} not divisible by stride {stride}")
    nt, nh, nw = tv // st, hv // sh, wv // sw
    split = video.reshape(b, nt, st, nh, sh, nw, sw, ch).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    patches = np.ascontiguousarray(split.reshape(b * nt * nh * nw, st, sh, sw, ch))
    return PatchGrid(patches, b, (nt, nh, nw), stride)


def patchwise_texture(model, grid: PatchGrid) -> Tensor:
    """Texture of every patch evaluated on its own, as a ``[B, nT, nH, nW]`` map.

    Patches are stacked along the batch axis; nothing in the model mixes
    information across that axis, so each cell sees only its own patch.
    """
    out = model.texture_map(grid.patches, clamp=True)
    if out.shape[1:] != (1, 1, 1):
        raise DimensionError(f"patch forward produced grid {out.shape[1:]}, expected one cell per patch")
    return T.reshape(out, (grid.batch,) + grid.grid)


def lpc_loss(texture: Tensor, patch_texture: Tensor) -> Tensor:
    """Mean over clips of ``1 - cos(Q, Q_hat)`` on the flattened maps.

    Unbatched ``[T, H, W]`` inputs are treated as a batch of one. Norms are
    clamped below at 1e-8. A clip whose maps are both numerically zero
    contributes 0 and triggers :class:`DegenerateInputWarning`.
    """
    texture = T.as_tensor(texture)
    patch_texture = T.as_tensor(patch_texture, like=texture)
    if texture.shape != patch_texture.shape:
        raise DimensionError(f"texture maps differ in shape: {texture.shape} vs {patch_texture.shape}")
    if texture.ndim == 3:
        texture = T.reshape(texture, (1,) + texture.shape)
        patch_texture = T.reshape(patch_texture, (1,) + patch_texture.shape)
    b = texture.shape[0]
    q = T.reshape(texture, (b, -1))
    qh = T.reshape(patch_texture, (b, -1))
    nq = np.linalg.norm(q.data, axis=1)
    nqh = np.linalg.norm(qh.data, axis=1)
    degenerate = (nq < DEGENERATE_NORM) & (nqh < DEGENERATE_NORM)
    if degenerate.any():
        warnings.warn("lpc_loss on all-zero maps; returning 0 for those clips", DegenerateInputWarning, stacklevel=2)
        keep = np.flatnonzero(~degenerate)
        if keep.size == 0:
            return Tensor(np.zeros(()), dtype=texture.dtype)
        q = T.gather(q, keep, axis=0)
        qh = T.gather(qh, keep, axis=0)
        nq, nqh = nq[keep], nqh[keep]
    inner = T.sum(q * qh, axis=1)
    norm_q = _clamped_norm(q, nq)
    norm_qh = _clamped_norm(qh, nqh)
    cos = inner / (norm_q * norm_qh)
    return T.sum(1.0 - cos) * (1.0 / b)


def _clamped_norm(x: Tensor, norms: np.ndarray, eps: float = 1e-8) -> Tensor:
    # rows below eps are treated as constant eps (zero gradient through the norm)
    if np.all(norms >= eps):
        return T.sqrt(T.sum(x * x, axis=1))
    small = norms < eps
    safe = T.sqrt(T.sum(x * x, axis=1) + Tensor(small.astype(x.dtype)))
    mask = Tensor((~small).astype(x.dtype))
    return safe * mask + Tensor(np.where(small, eps, 0.0).astype(x.dtype))
