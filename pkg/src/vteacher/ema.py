"""EMA mixing of teacher parameters from student snapshots."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LayoutMismatch


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    layout_id: str = "flat"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("weight vector contains non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


def _check_mixable(a: WeightVector, b: WeightVector):
    if a.layout_id != b.layout_id:
        raise LayoutMismatch(f"layout {a.layout_id!r} vs {b.layout_id!r}")
    if len(a) != len(b):
        raise LayoutMismatch(f"length {len(a)} vs {len(b)}")


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def ema_step(teacher: WeightVector, student: WeightVector, alpha: float) -> WeightVector:
    _check_mixable(teacher, student)
    _check_alpha(alpha)
    return WeightVector(alpha * teacher.values + (1.0 - alpha) * student.values, teacher.layout_id)


def ema_closed_form(w0: WeightVector, students: Sequence[WeightVector], alpha: float) -> WeightVector:
    """Teacher after ``len(students)`` EMA steps, written as an explicit
    weighted sum of the initial weights and every student snapshot.

    Terms are accumulated in ascending snapshot order.
    """
    _check_alpha(alpha)
    for s in students:
        _check_mixable(w0, s)
    k = len(students)
    out = alpha ** k * w0.values
    for i, s in enumerate(students, 1):
        out = out + alpha ** (k - i) * (1.0 - alpha) * s.values
    return WeightVector(out, w0.layout_id)
