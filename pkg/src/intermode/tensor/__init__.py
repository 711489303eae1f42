"""Minimal dense tensors with reverse-mode differentiation."""

from . import nn, ops
from .engine import (
    Graph,
    Node,
    NumericError,
    ShapeError,
    StateError,
    TensorError,
    numeric_grad,
    param_checksum,
)
from .optim import Adam
from .serialize import (
    FormatError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)

__all__ = [
    "Adam",
    "FormatError",
    "Graph",
    "Node",
    "NumericError",
    "ShapeError",
    "StateError",
    "TensorError",
    "load_checkpoint",
    "load_tensor",
    "nn",
    "numeric_grad",
    "ops",
    "param_checksum",
    "save_checkpoint",
    "save_tensor",
]
