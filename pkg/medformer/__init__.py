"""Desk-scale MedFormer: bidirectional-attention segmentation on a numpy autodiff core."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import AugmentConfig, ModelConfig, RunConfig, preset
from .data import ForwardOutput, SegSample
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateTokenError,
    FormatError,
    MedFormerError,
    NonFiniteGradientError,
    ShapeError,
    TrainingAborted,
)
from .model import MedFormer, build
from .tensor import Tensor, no_grad

__all__ = [
    "AugmentConfig",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateTokenError",
    "ForwardOutput",
    "FormatError",
    "MedFormer",
    "MedFormerError",
    "ModelConfig",
    "NonFiniteGradientError",
    "RunConfig",
    "SegSample",
    "ShapeError",
    "Tensor",
    "TrainingAborted",
    "__version__",
    "build",
    "no_grad",
    "preset",
]
