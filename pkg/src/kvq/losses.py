"""Training objective: PLCC loss, pairwise rank hinge, weighted total."""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputWarning
from .tensor import Tensor

_FLAT = 1e-12


@dataclass(frozen=True)
class LossWeights:
    rank: float = 1.0
    lpc: float = 1.0

    def __post_init__(self):
        if not (self.rank >= 0 and self.lpc >= 0):
            raise ConfigError(f"loss weights must be non-negative, got rank={self.rank}, lpc={self.lpc}")


def _inputs(q, q_gt):
    q = T.as_tensor(q)
    gt = np.asarray(q_gt.data if isinstance(q_gt, Tensor) else q_gt, dtype=np.float64)
    if q.ndim != 1 or gt.shape != q.shape:
        raise ContractError(f"predictions {q.shape} and targets {gt.shape} must be equal-length vectors")
    if q.size < 1:
        raise ContractError("empty batch")
    return q, gt


def plcc_loss(q, q_gt) -> Tensor:
    """``(1 - PLCC(q, q_gt)) / 2``.

    Zero variance in either sequence makes the correlation undefined; the
    loss then falls back to 0.5 with a :class:`DegenerateInputWarning`.
    """
    q, gt = _inputs(q, q_gt)
    if q.size < 2:
        raise ContractError("plcc_loss needs at least two samples")
    gc = gt - gt.mean()
    if np.std(q.data) < _FLAT or np.std(gt) < _FLAT:
        warnings.warn("plcc_loss on zero-variance input; returning 0.5", DegenerateInputWarning, stacklevel=2)
        return Tensor(np.array(0.5), dtype=q.dtype)
    qc = q - T.mean(q)
    gct = Tensor(gc, dtype=q.dtype)
    corr = T.sum(qc * gct) / (T.sqrt(T.sum(qc * qc)) * float(np.sqrt(np.sum(gc * gc))))
    return (1.0 - corr) * 0.5


def ordered_pairs(q_gt) -> tuple:
    """Index arrays ``(i, j)`` over all pairs with ``q_gt[i] > q_gt[j]``."""
    gt = np.asarray(q_gt, dtype=np.float64)
    i, j = np.nonzero(gt[:, None] > gt[None, :])
    return i, j


def rank_loss(q, q_gt) -> Tensor:
    """Mean zero-margin hinge ``max(0, q_j - q_i)`` over pairs with ``q_gt[i] > q_gt[j]``."""
    q, gt = _inputs(q, q_gt)
    i, j = ordered_pairs(gt)
    if i.size == 0:
        return Tensor(np.array(0.0), dtype=q.dtype)
    diff = T.gather(q, j) - T.gather(q, i)
    return T.mean(T.relu(diff))


def total_loss(plcc_value, rank_value, lpc_value, weights: LossWeights = LossWeights()) -> Tensor:
    plcc_value = T.as_tensor(plcc_value)
    return plcc_value + T.as_tensor(rank_value, like=plcc_value) * weights.rank \
        + T.as_tensor(lpc_value, like=plcc_value) * weights.lpc
