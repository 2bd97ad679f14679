"""Reverse-mode tensor engine, layer inventory, Adam, and checkpoints."""

from .autograd import (
    GraphCycle,
    NnError,
    NotScalarLoss,
    ShapeMismatch,
    Tensor,
    as_tensor,
    debug_checks,
    log_softmax,
    softmax_cross_entropy,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import LAYER_KINDS, LayerSpec, forward, init_params, output_shape
from .optim import Adam

__all__ = [
    "Adam",
    "CheckpointError",
    "GraphCycle",
    "LAYER_KINDS",
    "LayerSpec",
    "NnError",
    "NotScalarLoss",
    "ShapeMismatch",
    "Tensor",
    "as_tensor",
    "debug_checks",
    "forward",
    "init_params",
    "load_checkpoint",
    "log_softmax",
    "output_shape",
    "save_checkpoint",
    "softmax_cross_entropy",
]
