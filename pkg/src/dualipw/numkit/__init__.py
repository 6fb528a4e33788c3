"""Numerical substrate: tape autodiff, LSTM, AdamW, seeded RNG, checkpoints."""

from . import autodiff
from .adamw import AdamW, AdamWConfig, OptimizerError
from .autodiff import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    constant,
    no_grad,
    parameter,
    unchecked,
)
from .checkpoint import CHECKPOINT_HEADER, CheckpointError, load_checkpoint, save_checkpoint
from .graph import GradCheckResult, Graph, finite_diff_check
from .lstm import lstm_cell, lstm_forward, lstm_param_shapes
from .rng import STREAMS, stream_rng

__all__ = [
    "autodiff",
    "AdamW",
    "AdamWConfig",
    "OptimizerError",
    "AutodiffError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "constant",
    "no_grad",
    "parameter",
    "unchecked",
    "CHECKPOINT_HEADER",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "GradCheckResult",
    "Graph",
    "finite_diff_check",
    "lstm_cell",
    "lstm_forward",
    "lstm_param_shapes",
    "STREAMS",
    "stream_rng",
]
