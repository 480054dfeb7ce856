"""Desk-scale laboratory for momentum (EMA) teacher-student training.

Subpackages are intentionally flat: ``core`` (tape autodiff), ``encoder``
(staged MLP networks), ``momentum`` (EMA policies and target resolution),
``objectives`` (SSL losses), ``data``, ``trainer``, ``evaluation``,
``telemetry``, ``config`` and ``cli``.
"""

from .core import Tensor, Tape, GradMap, op_forward, op_backward, op_detach, op_grad_check

__all__ = [
    "Tensor",
    "Tape",
    "GradMap",
    "op_forward",
    "op_backward",
    "op_detach",
    "op_grad_check",
]

__version__ = "0.1.0"
