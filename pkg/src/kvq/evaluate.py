"""Evaluation of a trained model on clip directories or region-annotated image sets."""

import csv
import json
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import read_lpvq_dataset, replicate_image
from .lpvq import GRID, image_ids
from .metrics import (
    fixation_points,
    inter_sample_eval,
    intra_sample_eval,
    kl_div,
    nss,
    sauc,
    shuffled_negatives,
)
from .model import KVQModel
from .train import global_metrics, predict, prepare_video

ABSENT = "absent"
REPORT_FIELDS = ["metric", "dataset", "value"]


def is_region_dataset(path: str) -> bool:
    return os.path.exists(os.path.join(path, "lpvq.csv"))


def _to_grid(m: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    if m.shape == tuple(shape):
        return m
    with T.no_grad():
        return T.resample3d(T.Tensor(m), shape).data


def region_predictions(model: KVQModel, images: Dict[str, np.ndarray], frames: int = 16, batch_size: int = 8):
    """Time-averaged texture map of every image (replicated to ``frames``) on the 7x7 grid."""
    ids = list(images)
    videos = np.stack([prepare_video(replicate_image(images[i], frames), model.cfg.input_size) for i in ids])
    preds = predict(model, videos.astype(model.dtype), batch_size)
    out = {}
    for n, image_id in enumerate(ids):
        tex = preds["texture"][n].mean(axis=0, keepdims=True)
        out[image_id] = _to_grid(tex, (1, GRID, GRID))[0]
    return out


def saliency_scores(pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray]) -> Dict[str, float]:
    """Mean sAUC, NSS and KL over samples; negatives are the other samples' fixations."""
    fixations = [fixation_points(g) for g in gt_maps]
    s_auc, s_nss, s_kl = [], [], []
    for i, (pred, gt) in enumerate(zip(pred_maps, gt_maps)):
        pred = _to_grid(pred, gt.shape)
        negatives = shuffled_negatives(fixations, i)
        if len(negatives):
            s_auc.append(sauc(pred, fixations[i], negatives))
        if np.ptp(pred) > 0:
            s_nss.append(nss(pred, fixations[i]))
        s_kl.append(kl_div(gt, pred))
    mean = lambda xs: float(np.mean(xs)) if xs else ABSENT
    return {"sauc": mean(s_auc), "nss": mean(s_nss), "kl": mean(s_kl)}


def evaluate_clips(model: KVQModel, clips, batch_size: int = 8):
    """Global correlations and, when every clip carries saliency truth, saliency metrics."""
    videos = np.stack([prepare_video(c.video, model.cfg.input_size) for c in clips]).astype(model.dtype)
    preds = predict(model, videos, batch_size)
    mos = np.array([c.global_mos for c in clips], dtype=np.float64)
    metrics: Dict[str, object] = global_metrics(preds["quality"], mos)
    if all(c.saliency is not None for c in clips):
        metrics.update(saliency_scores(list(preds["saliency"]), [c.saliency for c in clips]))
    else:
        metrics.update({"sauc": ABSENT, "nss": ABSENT, "kl": ABSENT})
    samples = [
        {"id": c.meta.get("id", f"clip_{n:04d}"), "prediction": float(preds["quality"][n]), "mos": float(mos[n])}
        for n, c in enumerate(clips)
    ]
    return metrics, samples


def evaluate_regions(model: KVQModel, images, records, batch_size: int = 8):
    preds = region_predictions(model, images, batch_size=batch_size)
    inter_s, inter_p = inter_sample_eval(records, preds)
    intra = intra_sample_eval(records, preds)
    metrics = {
        "inter_srcc": inter_s, "inter_plcc": inter_p,
        "intra_srcc": intra.srcc, "intra_plcc": intra.plcc,
        "intra_evaluated": intra.evaluated, "intra_skipped": intra.skipped,
    }
    samples = [{"id": i, "prediction": preds[i].tolist()} for i in image_ids(records)]
    return metrics, samples


def evaluate_path(model: KVQModel, path: str, batch_size: int = 8):
    from .data import read_dataset

    if is_region_dataset(path):
        images, records = read_lpvq_dataset(path)
        return evaluate_regions(model, images, records, batch_size)
    return evaluate_clips(model, read_dataset(path), batch_size)


def write_report(out_dir: str, dataset: str, metrics: Dict, samples: List[Dict], tag: Optional[Dict] = None) -> None:
    """``report.csv`` (metric, dataset, value) and ``samples.jsonl``; ``tag`` rows go first."""
    os.makedirs(out_dir, exist_ok=True)
    rows = dict(tag or {})
    rows.update(metrics)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for key, value in rows.items():
            writer.writerow([key, dataset, repr(value) if isinstance(value, float) else value])
    with open(os.path.join(out_dir, "samples.jsonl"), "w") as fh:
        for sample in samples:
            fh.write(json.dumps(dict(sample, dataset=dataset, **(tag or {}))) + "\n")


def read_report(path: str) -> Dict[str, str]:
    with open(path, newline="") as fh:
        return {row["metric"]: row["value"] for row in csv.DictReader(fh)}
