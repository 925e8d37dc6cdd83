"""DropHead: structured head dropout for multi-head attention, with a small
numpy autodiff engine, a desk-scale transformer, and head-analysis tools."""

from .attention import (
    AttentionParams,
    DropHeadConfig,
    HeadMask,
    apply_drophead,
    multi_head_attention,
    sample_head_mask,
    scaled_dot_attention,
)
from .model import ModelConfig, Placement, TransformerModel
from .schedule import ScheduleSpec, drop_rate_at, learning_rate_at
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "DropHeadConfig", "HeadMask", "apply_drophead", "multi_head_attention",
    "sample_head_mask", "scaled_dot_attention", "ModelConfig", "Placement", "TransformerModel",
    "ScheduleSpec", "drop_rate_at", "learning_rate_at", "NonFiniteError", "ShapeError", "Tape",
    "TapeError", "Tensor", "TrainConfig", "evaluate", "train",
]
