"""Selective-backprop training laboratory.

A desk-scale stack for studying per-step layer-subset backpropagation:
a tape autodiff engine with a first-class detach, a LoRA-adapted nano
transformer with optionally 4-bit quantized base weights, selection
strategies and ratio schedules, AdamW with momentum-driven implicit
updates, a zeroth-order baseline, and a benchmark suite that measures
speedups and loss gaps between them.
"""

from .autodiff import Tape, Tensor, backward, detach, finite_difference_grad, primitive_forward
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    DimensionError,
    DivergenceError,
    IngestionError,
    LcsbError,
    MissingRngError,
    PlanError,
    ReportingError,
    ScheduleError,
    UnsupportedPrimitiveError,
)
from .model import BlockMode, LoraAdapter, Model, ModelConfig, init_model
from .quant import QuantizedLinear, dequantize, quantize_weights

__version__ = "0.1.0"
