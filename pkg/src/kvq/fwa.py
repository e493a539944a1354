"""Fusion-window attention.

Feature maps are ``[B, T, H, W, C]`` tensors. A window partition regroups
them as ``[B, N_w, M, C]`` with windows enumerated in (t, h, w) raster
order and slots inside a window likewise.

Each block computes:

* a single-head patch-correlation map over all ``N_w * M`` tokens, pooled
  into a window-correlation map that picks ``k`` routed windows per window
  (self excluded, ties to the smaller index);
* multi-head attention inside each window (intra);
* multi-head attention from each window's queries to the keys/values of its
  routed windows (cross).

The block output is intra + cross.
"""

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

Grid = Tuple[int, int, int]


@dataclass(frozen=True)
class WindowPartition:
    """Windows ``[B, N_w, M, C]`` plus the geometry needed to undo the split."""

    windows: Tensor
    grid: Grid
    window: Grid

    @property
    def counts(self) -> Grid:
        return tuple(g // w for g, w in zip(self.grid, self.window))

    @property
    def num_windows(self) -> int:
        return int(np.prod(self.counts))

    @property
    def window_volume(self) -> int:
        return int(np.prod(self.window))

    def merge(self, values: Tensor) -> Tensor:
        """Inverse of the partition for ``[B, N_w, M, *rest]`` values."""
        return windows_to_grid(values, self.grid, self.window)

    def inverse_index(self) -> np.ndarray:
        """``[N_w, M, 3]`` array of (t, h, w) grid coordinates per (window, slot)."""
        nt, nh, nw = self.counts
        wt, wh, ww = self.window
        coords = np.empty((self.num_windows, self.window_volume, 3), dtype=np.int64)
        for n in range(self.num_windows):
            it, rem = divmod(n, nh * nw)
            ih, iw = divmod(rem, nw)
            for m in range(self.window_volume):
                jt, rem2 = divmod(m, wh * ww)
                jh, jw = divmod(rem2, ww)
                coords[n, m] = (it * wt + jt, ih * wh + jh, iw * ww + jw)
        return coords


def effective_window(grid: Sequence[int], window: Sequence[int], clamp: bool = False) -> Grid:
    """Window actually used on ``grid``.

    Without ``clamp`` the window must divide the grid. With ``clamp`` any
    dimension that does not divide falls back to the full grid extent, which
    is how single-patch inputs get one window covering everything.
    """
    eff = []
    for g, w in zip(grid, window):
        if g % w == 0:
            eff.append(int(w))
        elif clamp:
            eff.append(int(g))
        else:
            raise DimensionError(f"window {tuple(window)} does not divide grid {tuple(grid)}")
    return tuple(eff)


def partition_windows(x: Tensor, window: Sequence[int]) -> WindowPartition:
    if x.ndim != 5:
        raise DimensionError(f"expected [B, T, H, W, C] features, got {x.shape}")
    b, t, h, w, c = x.shape
    window = tuple(int(v) for v in window)
    grid = (t, h, w)
    if any(g % v for g, v in zip(grid, window)):
        raise DimensionError(f"window {window} does not divide grid {grid}")
    wt, wh, ww = window
    split = T.reshape(x, (b, t // wt, wt, h // wh, wh, w // ww, ww, c))
    moved = T.transpose(split, (0, 1, 3, 5, 2, 4, 6, 7))
    windows = T.reshape(moved, (b, (t // wt) * (h // wh) * (w // ww), wt * wh * ww, c))
    return WindowPartition(windows, grid, window)


def windows_to_grid(values: Tensor, grid: Sequence[int], window: Sequence[int]) -> Tensor:
    b = values.shape[0]
    rest = values.shape[3:]
    t, h, w = grid
    wt, wh, ww = window
    split = T.reshape(values, (b, t // wt, h // wh, w // ww, wt, wh, ww) + rest)
    tail = tuple(range(7, 7 + len(rest)))
    moved = T.transpose(split, (0, 1, 4, 2, 5, 3, 6) + tail)
    return T.reshape(moved, (b, t, h, w) + rest)


@dataclass
class CorrelationBundle:
    """Per-block correlation maps and routing.

    ``patch_corr`` is ``[B, N_w*M, N_w*M]`` (rows sum to one),
    ``window_corr`` is ``[B, N_w, N_w]``, ``idx`` is ``[B, N_w, k]``.
    ``queries``/``keys``/``values`` are the correlation-branch projections,
    shaped ``[B, N_w, M, C]``; the cross-window path consumes them.
    """

    patch_corr: Tensor
    window_corr: Tensor
    idx: np.ndarray
    queries: Tensor
    keys: Tensor
    values: Tensor
    grid: Grid
    window: Grid

    @property
    def k(self) -> int:
        return self.idx.shape[-1]


def topk_route(window_corr: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, excluding the diagonal.

    Ties go to the smaller window index. Works on ``[..., N_w, N_w]``.
    """
    scores = np.asarray(window_corr)
    n = scores.shape[-1]
    if not 0 <= k < n:
        raise ConfigError(f"top_k={k} must be below the window count {n}")
    masked = np.where(np.eye(n, dtype=bool), -np.inf, scores)
    if not np.all(np.isfinite(scores)) or 4 * k > n:
        order = np.argsort(-masked, axis=-1, kind="stable")
        return order[..., :k].astype(np.int64)
    # few picks: repeated argmax, which returns the first (smallest) index among ties
    picks = np.empty(scores.shape[:-1] + (k,), dtype=np.int64)
    for j in range(k):
        best = np.argmax(masked, axis=-1)
        picks[..., j] = best
        np.put_along_axis(masked, best[..., None], -np.inf, axis=-1)
    return picks


def cws(wp: WindowPartition, proj: Dict[str, Tensor], k: int) -> CorrelationBundle:
    """Correlated-window selection.

    ``proj`` holds ``wq_c``, ``wk_c``, ``wv_c`` (each ``C x C``).
    """
    x = wp.windows
    b, n_w, m, c = x.shape
    if not 0 <= k < n_w:
        raise ConfigError(f"top_k={k} must be below the window count {n_w}")
    q = T.linear(x, proj["wq_c"])
    key = T.linear(x, proj["wk_c"])
    v = T.linear(x, proj["wv_c"])
    qf = T.reshape(q, (b, n_w * m, c))
    kf = T.reshape(key, (b, n_w * m, c))
    patch_corr = T.softmax(T.matmul(qf, T.swapaxes(kf, -1, -2)), axis=-1)
    window_corr = T.avgpool(patch_corr, (m, m), (1, 2))
    idx = topk_route(window_corr.data, k)
    return CorrelationBundle(patch_corr, window_corr, idx, q, key, v, wp.grid, wp.window)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [B, N, L, C] -> [B, N, heads, L, C/heads]
    b, n, length, c = x.shape
    return T.transpose(T.reshape(x, (b, n, length, heads, c // heads)), (0, 1, 3, 2, 4))


def _join_heads(x: Tensor) -> Tensor:
    b, n, heads, length, d = x.shape
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4)), (b, n, length, heads * d))


def attention_probs(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Softmax weights ``[B, N, heads, L_q, L_k]`` with scale ``1/sqrt(C/heads)``."""
    c = q.shape[-1]
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(c // heads))
    return T.softmax(scores, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over ``[B, N, L, C]`` groups, ``C/heads`` per head."""
    return _join_heads(T.matmul(attention_probs(q, k, heads), _split_heads(v, heads)))


def iwa(wp: WindowPartition, proj: Dict[str, Tensor], heads: int) -> Tensor:
    """Intra-window attention, output projected by ``wo_i`` and re-assembled to the grid."""
    x = wp.windows
    if x.shape[-1] % heads:
        raise ConfigError(f"channels {x.shape[-1]} not divisible by heads {heads}")
    q = T.linear(x, proj["wq_i"])
    k = T.linear(x, proj["wk_i"])
    v = T.linear(x, proj["wv_i"])
    out = T.linear(attention(q, k, v, heads), proj["wo_i"])
    return wp.merge(out)


def gather_windows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``[B, N_w, M, C]`` gathered by ``[B, N_w, k]`` into ``[B, N_w, k*M, C]``."""
    b, n_w, m, c = x.shape
    if idx.shape[:2] != (b, n_w):
        raise ContractError(f"routing indices {idx.shape} do not match windows {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_w):
        raise ContractError("routing index out of range")
    k = idx.shape[-1]
    flat = T.reshape(x, (b * n_w, m, c))
    global_idx = idx + (np.arange(b) * n_w)[:, None, None]
    picked = T.gather(flat, global_idx, axis=0)
    return T.reshape(picked, (b, n_w, k * m, c))


def cwa(wp: WindowPartition, bundle: CorrelationBundle, proj: Dict[str, Tensor], heads: int) -> Tensor:
    """Cross-window attention: own queries, keys/values gathered from routed windows.

    With no routed windows (k == 0) the contribution is identically zero.
    """
    x = wp.windows
    if bundle.idx.shape[:2] != x.shape[:2]:
        raise ContractError(f"bundle routing {bundle.idx.shape} inconsistent with partition {x.shape}")
    if bundle.k == 0:
        zeros = np.zeros(wp.windows.shape[:3] + (proj["wo_c"].shape[1],), dtype=x.dtype)
        return wp.merge(Tensor(zeros))
    keys = gather_windows(bundle.keys, bundle.idx)
    values = gather_windows(bundle.values, bundle.idx)
    out = T.linear(attention(bundle.queries, keys, values, heads), proj["wo_c"])
    return wp.merge(out)


def fwa_forward(
    x: Tensor,
    params: Dict[str, Tensor],
    window: Sequence[int],
    k: int,
    heads: int,
    clamp: bool = False,
) -> Tuple[Tensor, CorrelationBundle]:
    """Intra + cross attention over ``x``; also returns the block's correlation bundle.

    ``clamp`` adapts the window to small inputs and lowers ``k`` to the
    available number of other windows.
    """
    grid = x.shape[1:4]
    eff = effective_window(grid, window, clamp)
    wp = partition_windows(x, eff)
    if clamp:
        k = min(k, wp.num_windows - 1)
    bundle = cws(wp, params, k)
    out = iwa(wp, params, heads) + cwa(wp, bundle, params, heads)
    return out, bundle


def patch_significance(bundle: CorrelationBundle) -> Tensor:
    """Attention mass each patch receives (column sums of the patch map) as ``[B, T, H, W]``."""
    b = bundle.patch_corr.shape[0]
    n_w = bundle.window_corr.shape[-1]
    m = int(np.prod(bundle.window))
    received = T.sum(bundle.patch_corr, axis=1)
    return windows_to_grid(T.reshape(received, (b, n_w, m)), bundle.grid, bundle.window)


def init_fwa_params(channels: int, rng: np.random.Generator, std: float = 0.02, dtype=None) -> Dict[str, Tensor]:
    dtype = dtype or T.get_default_dtype()
    names = ("wq_c", "wk_c", "wv_c", "wo_c", "wq_i", "wk_i", "wv_i", "wo_i")
    return {
        name: Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True, dtype=dtype)
        for name in names
    }


def routing_rows(bundles: Iterable[CorrelationBundle], batch_index: int = 0):
    """Yield ``(block_id, src_window, rank, dst_window, score)`` for every routed pair."""
    for block_id, bundle in enumerate(bundles):
        scores = bundle.window_corr.data[batch_index]
        idx = bundle.idx[batch_index]
        for src in range(idx.shape[0]):
            for rank, dst in enumerate(idx[src]):
                yield block_id, src, rank, int(dst), float(scores[src, dst])


def write_routing_csv(path, bundles: Iterable[CorrelationBundle], batch_index: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block_id", "src_window", "rank", "dst_window", "score"])
        for row in routing_rows(bundles, batch_index):
            writer.writerow(row[:4] + (repr(row[4]),))
