"""Run configuration: flat ``dotted.key = value`` text files.

Blank lines and lines starting with ``#`` are ignored. Tuples are written as
comma-separated integers. Unknown keys are rejected.
"""

import hashlib
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError
from .losses import LossWeights

_TUPLE_KEYS = {
    "model.patch_size", "model.channels", "model.depths", "model.heads",
    "model.window_size", "model.input_size",
}
_INT_KEYS = {
    "model.top_k", "model.mlp_ratio", "optim.epochs", "optim.batch_size", "seed",
    "data.train_clips", "data.eval_clips", "data.synth_seed", "data.lpvq_images", "optim.saliency_warmup",
}
_FLOAT_KEYS = {"loss.rank", "loss.lpc", "loss.lpc_fraction", "optim.lr", "optim.saliency_lr_scale", "data.spread",
                "data.shuffle_cells"}
_BOOL_KEYS = {"loss.freeze_patch_branch", "data.augment"}
_STR_KEYS = {"dtype", "data.train", "data.eval", "out"}
KNOWN_KEYS = _TUPLE_KEYS | _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS

# desk-scale defaults sized for a single CPU core
DEFAULTS: Dict[str, str] = {
    "model.patch_size": "2,4,4",
    "model.channels": "16,32",
    "model.depths": "2,2",
    "model.heads": "2,4",
    "model.window_size": "1,7,7",
    "model.top_k": "2",
    "model.mlp_ratio": "4",
    "model.input_size": "8,56,56",
    "loss.rank": "1.0",
    "loss.lpc": "1.0",
    "loss.lpc_fraction": "1.0",
    "loss.freeze_patch_branch": "false",
    "optim.lr": "1e-3",
    "optim.epochs": "8",
    "optim.batch_size": "8",
    "optim.saliency_warmup": "0",
    "optim.saliency_lr_scale": "1.0",
    "seed": "0",
    "dtype": "float64",
    "data.train": "",
    "data.eval": "",
    "data.train_clips": "200",
    "data.eval_clips": "64",
    "data.synth_seed": "1000",
    "data.spread": "0.25",
    "data.lpvq_images": "8",
    "data.augment": "true",
    "data.shuffle_cells": "0.0",
    "out": "",
}


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        values[key] = value
    return values


def _convert(key: str, value: str):
    try:
        if key in _TUPLE_KEYS:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    weights: LossWeights
    lpc_fraction: float
    freeze_patch_branch: bool
    lr: float
    epochs: int
    batch_size: int
    saliency_warmup: int
    saliency_lr_scale: float
    seed: int
    dtype: str
    train_data: str
    eval_data: str
    train_clips: int
    eval_clips: int
    synth_seed: int
    spread: float
    lpvq_images: int
    augment: bool
    shuffle_cells: float
    out_dir: str
    raw: Dict[str, str] = field(default_factory=dict, compare=False)

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, str] = ()) -> "RunConfig":
        raw = dict(DEFAULTS)
        for key, value in dict(overrides).items():
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            raw[key] = str(value)
        v = {k: _convert(k, s) for k, s in raw.items()}
        backbone = BackboneConfig(
            patch_size=v["model.patch_size"], channels=v["model.channels"], depths=v["model.depths"],
            heads=v["model.heads"], window_size=v["model.window_size"], top_k=v["model.top_k"],
            mlp_ratio=v["model.mlp_ratio"], input_size=v["model.input_size"],
        )
        if v["dtype"] not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {v['dtype']!r}")
        if not 0.0 <= v["loss.lpc_fraction"] <= 1.0:
            raise ConfigError("loss.lpc_fraction must lie in [0, 1]")
        if v["optim.lr"] <= 0 or v["optim.epochs"] < 0 or v["optim.batch_size"] < 2:
            raise ConfigError("need optim.lr > 0, optim.epochs >= 0 and optim.batch_size >= 2")
        if v["optim.saliency_warmup"] < 0 or v["optim.saliency_lr_scale"] < 0:
            raise ConfigError("optim.saliency_warmup and optim.saliency_lr_scale must be non-negative")
        if not 0.0 <= v["data.shuffle_cells"] <= 1.0:
            raise ConfigError("data.shuffle_cells is a probability in [0, 1]")
        return cls(
            backbone=backbone,
            weights=LossWeights(rank=v["loss.rank"], lpc=v["loss.lpc"]),
            lpc_fraction=v["loss.lpc_fraction"],
            freeze_patch_branch=v["loss.freeze_patch_branch"],
            lr=v["optim.lr"],
            epochs=v["optim.epochs"],
            batch_size=v["optim.batch_size"],
            saliency_warmup=v["optim.saliency_warmup"],
            saliency_lr_scale=v["optim.saliency_lr_scale"],
            seed=v["seed"],
            dtype=v["dtype"],
            train_data=v["data.train"],
            eval_data=v["data.eval"],
            train_clips=v["data.train_clips"],
            eval_clips=v["data.eval_clips"],
            synth_seed=v["data.synth_seed"],
            spread=v["data.spread"],
            lpvq_images=v["data.lpvq_images"],
            augment=v["data.augment"],
            shuffle_cells=v["data.shuffle_cells"],
            out_dir=v["out"],
            raw=raw,
        )

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Mapping[str, str] = ()) -> "RunConfig":
        values = {}
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                values = parse_config_text(fh.read())
        values.update(overrides)
        return cls.from_mapping(values)

    def with_overrides(self, **overrides) -> "RunConfig":
        raw = dict(self.raw)
        raw.update({k: str(v) for k, v in overrides.items()})
        return RunConfig.from_mapping(raw)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    def config_hash(self) -> str:
        """Hash of every setting except the seed and output directory."""
        keep = {k: v for k, v in self.raw.items() if k not in ("seed", "out")}
        text = "".join(f"{k}={keep[k]}\n" for k in sorted(keep))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def validate_paths(self) -> None:
        for key, path in (("data.train", self.train_data), ("data.eval", self.eval_data)):
            if path and not os.path.exists(path):
                raise ConfigError(f"{key} path does not exist: {path}")


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=int(seed), raw=dict(cfg.raw, seed=str(int(seed))))
