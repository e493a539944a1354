"""Saliency-weighted video quality model with fusion-window attention and local perception constraint."""

from .backbone import BackboneConfig
from .errors import (
    ConfigError,
    ContractError,
    CoverageError,
    DegenerateInputWarning,
    DimensionError,
    KVQError,
    UndefinedMetricError,
    ValidationError,
)
from .model import KVQModel
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "ContractError",
    "CoverageError",
    "DegenerateInputWarning",
    "DimensionError",
    "KVQError",
    "KVQModel",
    "Tensor",
    "UndefinedMetricError",
    "ValidationError",
]
