"""Class-aware adaptive pseudo-label selection.

A two-step filter over teacher predictions for one target image:

1. drop everything whose joint confidence is below a low global threshold;
2. histogram the survivors per argmax class into ``M`` equal intervals of
   ``[0, 1]``, take the right endpoint of the fullest interval, and pull
   that class's threshold toward it with an EMA whose target is scaled by a
   cosine-annealed factor ``beta``;
3. keep a prediction when its argmax-class score clears the *updated*
   threshold of that class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detection import Detection, PredictionBatch, argmax_class
from .errors import RangeError


@dataclass(frozen=True)
class ThresholdState:
    """Per-class adaptive thresholds plus the hyperparameters that move them.

    ``k`` counts completed update steps. Past ``total_iters`` the cosine
    factor saturates at ``beta_end``.
    """

    per_class: Tuple[float, ...]
    delta_t: float = 0.2
    alpha_t: float = 0.9999
    beta_start: float = 1.0
    beta_end: float = 0.85
    total_iters: int = 1
    k: int = 0
    num_bins: int = 20

    def __post_init__(self):
        object.__setattr__(self, "per_class", tuple(float(d) for d in self.per_class))
        self.check()

    @classmethod
    def initial(cls, num_classes: int, delta_0: float = 0.8, **kwargs) -> "ThresholdState":
        return cls(per_class=(delta_0,) * num_classes, **kwargs)

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    def check(self):
        def unit(name, v):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise RangeError(f"{name} must lie in [0, 1], got {v}")

        if not self.per_class:
            raise RangeError("per_class must hold at least one class")
        for c, d in enumerate(self.per_class):
            unit(f"per_class[{c}]", d)
        unit("delta_t", self.delta_t)
        unit("alpha_t", self.alpha_t)
        for name in ("beta_start", "beta_end"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise RangeError(f"{name} must be finite and >= 0, got {v}")
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise RangeError(f"num_bins must be an integer >= 2, got {self.num_bins}")
        if int(self.total_iters) != self.total_iters or self.total_iters < 1:
            raise RangeError(f"total_iters must be a positive integer, got {self.total_iters}")
        if int(self.k) != self.k or self.k < 0:
            raise RangeError(f"k must be a non-negative integer, got {self.k}")


@dataclass(frozen=True)
class ConfidenceHistogram:
    """``counts[c, m]`` holds the number of class-``c`` predictions in ``((m)/M, (m+1)/M]``
    (zero-based ``m``; the first interval also takes ``conf == 0``)."""

    counts: np.ndarray

    @property
    def num_bins(self) -> int:
        return self.counts.shape[1]

    def merge(self, other: "ConfidenceHistogram") -> "ConfidenceHistogram":
        return ConfidenceHistogram(self.counts + other.counts)


@dataclass(frozen=True)
class PseudoLabel:
    detection: Detection
    assigned_class: int
    one_hot: Tuple[int, ...]


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: str
    labels: Tuple[PseudoLabel, ...] = ()

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


def coarse_filter(batch: PredictionBatch, delta_t: float) -> PredictionBatch:
    return batch.with_detections([d for d in batch.detections if d.conf >= delta_t])


def bin_index(conf, num_bins: int):
    """1-based interval index ``m`` such that ``(m-1)/M < conf <= m/M``.

    ``ceil(conf * M)`` can land one off when the product rounds across an
    integer (``0.15 * 20 == 3.0000000000000004``), so the candidate is checked
    against the interval edges as computed in floating point.
    """
    conf = np.asarray(conf, dtype=np.float64)
    m = np.ceil(conf * num_bins).astype(np.int64)
    m = np.clip(m, 1, num_bins)
    m = np.where((m > 1) & (conf <= (m - 1) / num_bins), m - 1, m)
    m = np.where((m < num_bins) & (conf > m / num_bins), m + 1, m)
    return m


def accumulate_histogram(batch: PredictionBatch, num_bins: int, num_classes: int) -> ConfidenceHistogram:
    counts = np.zeros((num_classes, num_bins), dtype=np.int64)
    if batch.detections:
        classes = [argmax_class(d)[0] for d in batch.detections]
        bins = bin_index([d.conf for d in batch.detections], num_bins)
        np.add.at(counts, (np.asarray(classes), bins - 1), 1)
    return ConfidenceHistogram(counts)


def mode_endpoint(hist: ConfidenceHistogram, c: int) -> Optional[float]:
    """Right endpoint of the fullest interval for class ``c``; the higher
    interval wins ties. ``None`` when the class has no predictions."""
    row = hist.counts[c]
    top = row.max()
    if top == 0:
        return None
    m = int(np.flatnonzero(row == top)[-1]) + 1
    return m / hist.num_bins


def beta_at(k: int, total_iters: int, beta_start: float, beta_end: float) -> float:
    k = min(k, total_iters)
    return beta_end + 0.5 * (beta_start - beta_end) * (1.0 + math.cos(math.pi * k / total_iters))


def cosine_beta(state: ThresholdState) -> float:
    return beta_at(state.k, state.total_iters, state.beta_start, state.beta_end)


def update_thresholds(state: ThresholdState, deltas: Sequence[Optional[float]]) -> ThresholdState:
    """One EMA step on every class that produced a mode endpoint.

    The factor ``beta`` is evaluated at the new iteration index ``k + 1``.
    Classes whose endpoint is ``None`` keep their threshold.
    """
    if len(deltas) != state.num_classes:
        raise ValueError(f"expected {state.num_classes} endpoints, got {len(deltas)}")
    k = state.k + 1
    beta = beta_at(k, state.total_iters, state.beta_start, state.beta_end)
    a = state.alpha_t
    new = []
    for old, target in zip(state.per_class, deltas):
        if target is None:
            new.append(old)
        else:
            new.append(min(1.0, max(0.0, a * old + (1.0 - a) * beta * target)))
    return replace(state, per_class=tuple(new), k=k)


def select_with_thresholds(batch: PredictionBatch, thresholds: Sequence[float]) -> PseudoLabelSet:
    num_classes = len(thresholds)
    labels = []
    for d in batch.detections:
        c, score = argmax_class(d)
        if score >= thresholds[c]:
            one_hot = tuple(1 if i == c else 0 for i in range(num_classes))
            labels.append(PseudoLabel(d, c, one_hot))
    return PseudoLabelSet(batch.image_id, tuple(labels))


def select_pseudo_labels(batch: PredictionBatch, state: ThresholdState) -> PseudoLabelSet:
    return select_with_thresholds(batch, state.per_class)


def caps_step(batch: PredictionBatch, state: ThresholdState) -> Tuple[PseudoLabelSet, ThresholdState]:
    kept = coarse_filter(batch, state.delta_t)
    hist = accumulate_histogram(kept, state.num_bins, state.num_classes)
    deltas = [mode_endpoint(hist, c) for c in range(state.num_classes)]
    state = update_thresholds(state, deltas)
    return select_pseudo_labels(kept, state), state


def run_caps(batches: Sequence[PredictionBatch], state: ThresholdState) -> Tuple[List[PseudoLabelSet], ThresholdState, np.ndarray]:
    """Feed batches through ``caps_step`` in order.

    Returns the per-image selections, the final state and the threshold
    trajectory, shape ``(len(batches) + 1, num_classes)`` with row 0 the
    initial thresholds.
    """
    selections = []
    trajectory = np.empty((len(batches) + 1, state.num_classes))
    trajectory[0] = state.per_class
    for i, batch in enumerate(batches, 1):
        labels, state = caps_step(batch, state)
        selections.append(labels)
        trajectory[i] = state.per_class
    return selections, state, trajectory
