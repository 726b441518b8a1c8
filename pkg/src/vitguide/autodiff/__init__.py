"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .optim import SGD, AdamW, OptimizerState, adamw_step
from .schedule import LrSchedule, lr_at
from .tensor import (
    Graph,
    NumericFault,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    trace,
)

__all__ = [
    "AdamW",
    "Graph",
    "LrSchedule",
    "NumericFault",
    "OptimizerState",
    "SGD",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "backward",
    "default_dtype",
    "lr_at",
    "no_grad",
    "ops",
    "precision",
    "set_default_dtype",
    "trace",
]
