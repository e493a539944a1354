"""Evaluation metrics: correlation, saliency (NSS, shuffled AUC, KL) and region protocols."""

from typing import Mapping, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, CoverageError, UndefinedMetricError
from .lpvq import GRID, AnnotationRecord, cell_mos, image_ids

_FLAT = 1e-12


def _pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError("correlation needs at least two samples")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if nx < _FLAT * max(1.0, np.abs(x).max()) or ny < _FLAT * max(1.0, np.abs(y).max()):
        raise UndefinedMetricError("correlation undefined for a constant sequence")
    return float(np.clip((xc @ yc) / (nx * ny), -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman correlation; ties get average ranks."""
    x, y = _pair(x, y)
    return plcc(rankdata(x), rankdata(y))


# -- saliency ---------------------------------------------------------------

def fixation_points(s_gt) -> np.ndarray:
    """Coordinates ``[n, ndim]`` of cells with ``S_gt >= 0.9 * max(S_gt)``."""
    s = np.asarray(s_gt, dtype=np.float64)
    if np.any(s < 0):
        raise ContractError("saliency ground truth must be nonnegative")
    peak = s.max(initial=0.0)
    if peak <= 0:
        raise UndefinedMetricError("saliency ground truth has no positive value; no fixation points")
    return np.argwhere(s >= 0.9 * peak)


def _values_at(s: np.ndarray, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.int64).reshape(-1, s.ndim)
    return s[tuple(points.T)]


def nss(s_pred, fixations) -> float:
    s = np.asarray(s_pred, dtype=np.float64)
    if len(fixations) == 0:
        raise ContractError("nss needs at least one fixation")
    sd = s.std()
    if sd < _FLAT * max(1.0, np.abs(s).max()):
        raise UndefinedMetricError("nss undefined for a constant prediction")
    return float(((_values_at(s, fixations) - s.mean()) / sd).mean())


def auc(positives, negatives) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via the rank-sum statistic."""
    pos = np.asarray(positives, dtype=np.float64).reshape(-1)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("auc needs nonempty positive and negative sets")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def sauc(s_pred, fixations, negatives) -> float:
    """Shuffled AUC: positives are this sample's fixations, negatives other samples' fixations."""
    s = np.asarray(s_pred, dtype=np.float64)
    fix = np.asarray(fixations, dtype=np.int64).reshape(-1, s.ndim)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, s.ndim)
    if len(fix) == 0 or len(neg) == 0:
        raise ContractError("sauc needs nonempty fixation and negative sets")
    if {tuple(p) for p in fix} & {tuple(p) for p in neg}:
        raise ContractError("fixations and negatives must be disjoint")
    return auc(_values_at(s, fix), _values_at(s, neg))


def shuffled_negatives(all_fixations: Sequence[np.ndarray], index: int) -> np.ndarray:
    """Union of every other sample's fixation points, minus this sample's own."""
    own = {tuple(p) for p in all_fixations[index]}
    pool = {tuple(p) for i, f in enumerate(all_fixations) if i != index for p in f}
    return np.array(sorted(pool - own), dtype=np.int64)


def kl_div(s_gt, s_pred, eps: float = 1e-7) -> float:
    """KL(ground truth || prediction) after eps-smoothing and normalizing both maps."""
    p = np.asarray(s_gt, dtype=np.float64).reshape(-1)
    q = np.asarray(s_pred, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ContractError(f"map sizes differ: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise ContractError("kl_div needs nonnegative maps")
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


# -- region protocols ---------------------------------------------------------

class IntraSampleResult(NamedTuple):
    srcc: float
    plcc: float
    evaluated: int
    skipped: int


def _check_coverage(records, predictions: Mapping[str, np.ndarray]):
    ids = image_ids(records)
    out = []
    for image_id in ids:
        if image_id not in predictions:
            raise CoverageError(f"no prediction for image {image_id!r}")
        pred = np.asarray(predictions[image_id], dtype=np.float64)
        if pred.shape != (GRID, GRID) or not np.all(np.isfinite(pred)):
            raise CoverageError(f"prediction for {image_id!r} must be a finite {GRID}x{GRID} map, got {pred.shape}")
        out.append((image_id, cell_mos(records, image_id), pred))
    return out


def inter_sample_eval(records: Sequence[AnnotationRecord], predictions: Mapping[str, np.ndarray]):
    """SRCC/PLCC pooled over every (image, cell); MOS is the mean over annotators."""
    items = _check_coverage(records, predictions)
    mos = np.concatenate([m.reshape(-1) for _, m, _ in items])
    pred = np.concatenate([p.reshape(-1) for _, _, p in items])
    return srcc(pred, mos), plcc(pred, mos)


def intra_sample_eval(records: Sequence[AnnotationRecord], predictions: Mapping[str, np.ndarray]) -> IntraSampleResult:
    """Per-image SRCC/PLCC over the 49 cells, averaged over images.

    Images whose cell MOS is constant are skipped and counted. A constant
    prediction on a varying image scores 0 for that image.
    """
    items = _check_coverage(records, predictions)
    s_vals, p_vals, skipped = [], [], 0
    for _, mos, pred in items:
        if np.ptp(mos) == 0:
            skipped += 1
            continue
        if np.ptp(pred) == 0:
            s_vals.append(0.0)
            p_vals.append(0.0)
            continue
        s_vals.append(srcc(pred, mos))
        p_vals.append(plcc(pred, mos))
    if not s_vals:
        raise UndefinedMetricError("every image has constant cell MOS")
    return IntraSampleResult(float(np.mean(s_vals)), float(np.mean(p_vals)), len(s_vals), skipped)
