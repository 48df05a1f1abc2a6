"""Tensor library: dense arrays, reverse-mode autodiff, primitive ops."""

from . import kernels, ops
from .core import (
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward,
    debug_enabled,
    live_tensor_bytes,
    peak_tensor_bytes,
    record,
    reset_peak_tensor_bytes,
    set_debug,
)

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "debug_enabled",
    "kernels",
    "live_tensor_bytes",
    "ops",
    "peak_tensor_bytes",
    "record",
    "reset_peak_tensor_bytes",
    "set_debug",
]
