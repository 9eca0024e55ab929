"""Invertible-flow density estimation and likelihood-based anomaly detection."""

from .checkpoint import load_model, save_model
from .kernels import BACKEND
from .models import (
    FlowModel,
    ModelConfig,
    build_variant,
    mix_latents,
    optimize_early_latents,
)
from .tensor import Parameter, Tape, Tensor, backward
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FlowModel",
    "ModelConfig",
    "Parameter",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_variant",
    "load_model",
    "mix_latents",
    "optimize_early_latents",
    "save_model",
    "train",
    "__version__",
]
