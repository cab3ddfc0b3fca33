"""Minimal reverse-mode tensor engine."""

from .core import AutodiffTape, Tensor, grad_enabled, no_grad, parameter
from .optim import Adam, AdamState, adam_step
from . import ops

__all__ = ["AutodiffTape", "Tensor", "grad_enabled", "no_grad", "parameter", "Adam", "AdamState", "adam_step", "ops"]
