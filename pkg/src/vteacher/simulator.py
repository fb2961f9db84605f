"""Synthetic target-domain detection streams and pseudo-label evaluation.

Each class has its own confidence distributions for correct detections and
false positives, so "easy" classes (high, tight confidences) and "hard"
ones (low, diffuse) can be mixed in one stream. Every generated detection
carries its ground truth inline, which makes evaluation plain counting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .caps import PseudoLabelSet, ThresholdState, run_caps, select_with_thresholds
from .detection import FALSE_POSITIVE, BBox, Detection, PredictionBatch, argmax_class
from .errors import InvalidProfile, StreamMismatch

RNG_ALGORITHM = "numpy.random.PCG64 seeded by SeedSequence([seed, image_index])"


@dataclass(frozen=True)
class ConfDist:
    """Confidence distribution: ``beta`` with shapes ``(a, b)`` or ``uniform`` on ``[a, b]``."""

    kind: str = "beta"
    a: float = 2.0
    b: float = 2.0

    def check(self):
        if self.kind == "beta":
            if not (self.a > 0 and self.b > 0 and math.isfinite(self.a) and math.isfinite(self.b)):
                raise InvalidProfile(f"beta shapes must be positive and finite, got ({self.a}, {self.b})")
        elif self.kind == "uniform":
            if not (0.0 <= self.a <= self.b <= 1.0):
                raise InvalidProfile(f"uniform bounds must satisfy 0 <= a <= b <= 1, got ({self.a}, {self.b})")
        else:
            raise InvalidProfile(f"unknown distribution kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "beta":
            return rng.beta(self.a, self.b, n)
        return rng.uniform(self.a, self.b, n)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    tp_conf: ConfDist
    fp_conf: ConfDist
    tp_rate: float = 2.0
    fp_rate: float = 2.0
    box_size_range: Tuple[float, float] = (16.0, 128.0)

    def check(self):
        self.tp_conf.check()
        self.fp_conf.check()
        for name in ("tp_rate", "fp_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidProfile(f"class {self.class_id}: {name} must be finite and >= 0, got {v}")
        lo, hi = self.box_size_range
        if not (0 < lo <= hi):
            raise InvalidProfile(f"class {self.class_id}: box_size_range must satisfy 0 < lo <= hi, got {self.box_size_range}")

    def to_dict(self) -> dict:
        return {
            "class": self.class_id,
            "tp_conf": self.tp_conf.to_dict(),
            "fp_conf": self.fp_conf.to_dict(),
            "tp_rate": self.tp_rate,
            "fp_rate": self.fp_rate,
            "box_size_range": list(self.box_size_range),
        }


def _check_profiles(profiles: Sequence[ClassProfile]) -> List[ClassProfile]:
    ordered = sorted(profiles, key=lambda p: p.class_id)
    if [p.class_id for p in ordered] != list(range(len(ordered))) or not ordered:
        raise InvalidProfile(f"class ids must be 0..C-1 without gaps, got {[p.class_id for p in profiles]}")
    for p in ordered:
        p.check()
    return ordered


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def generate_image(profiles: Sequence[ClassProfile], index: int, image_size=(640, 640), seed: int = 0) -> PredictionBatch:
    """One image's detections; depends only on ``(seed, index)``."""
    rng = image_rng(seed, index)
    width, height = image_size
    num_classes = len(profiles)
    dets = []
    for p in profiles:
        n_tp, n_fp = rng.poisson(p.tp_rate), rng.poisson(p.fp_rate)
        confs = np.concatenate([p.tp_conf.sample(rng, n_tp), p.fp_conf.sample(rng, n_fp)])
        truth = [p.class_id] * n_tp + [FALSE_POSITIVE] * n_fp
        n = n_tp + n_fp
        lo, hi = p.box_size_range
        sizes = np.minimum(rng.uniform(lo, hi, (n, 2)), (width, height))
        x1 = rng.uniform(0.0, 1.0, n) * (width - sizes[:, 0])
        y1 = rng.uniform(0.0, 1.0, n) * (height - sizes[:, 1])
        # off-class scores stay strictly below the generating class's score
        others = rng.uniform(0.0, 0.5, (n, num_classes)) * confs[:, None]
        for j in range(n):
            scores = others[j].copy()
            scores[p.class_id] = confs[j]
            box = BBox(float(x1[j]), float(y1[j]), float(x1[j] + sizes[j, 0]), float(y1[j] + sizes[j, 1]))
            dets.append(Detection(box, scores, float(confs[j]), truth[j]))
    return PredictionBatch(f"sim-{index:06d}", tuple(dets), (width, height))


def generate_stream(profiles: Sequence[ClassProfile], num_images: int, image_size=(640, 640), seed: int = 0) -> List[PredictionBatch]:
    profiles = _check_profiles(profiles)
    if num_images < 0:
        raise InvalidProfile(f"num_images must be >= 0, got {num_images}")
    return [generate_image(profiles, i, image_size, seed) for i in range(num_images)]


@dataclass
class ClassMetrics:
    kept: int = 0
    dropped: int = 0
    kept_correct: int = 0
    kept_false: int = 0
    total_correct: int = 0

    @property
    def precision(self) -> Optional[float]:
        return self.kept_correct / self.kept if self.kept else None

    @property
    def recall(self) -> Optional[float]:
        return self.kept_correct / self.total_correct if self.total_correct else None

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None:
            return None
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __iadd__(self, other: "ClassMetrics"):
        self.kept += other.kept
        self.dropped += other.dropped
        self.kept_correct += other.kept_correct
        self.kept_false += other.kept_false
        self.total_correct += other.total_correct
        return self

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "dropped": self.dropped,
            "kept_correct": self.kept_correct,
            "kept_false": self.kept_false,
            "total_correct": self.total_correct,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    per_class: List[ClassMetrics]
    label: str = ""
    final_thresholds: Optional[List[float]] = None
    trajectory: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def aggregate(self) -> ClassMetrics:
        total = ClassMetrics()
        for m in self.per_class:
            total += m
        return total

    @property
    def macro_f1(self) -> Optional[float]:
        """Mean F1 over classes that have correct detections; a class with
        nothing selected counts as F1 = 0."""
        scores = [m.f1 or 0.0 for m in self.per_class if m.total_correct]
        return sum(scores) / len(scores) if scores else None

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "per_class": [m.to_dict() for m in self.per_class],
            "aggregate": self.aggregate.to_dict(),
            "macro_f1": self.macro_f1,
        }
        if self.final_thresholds is not None:
            out["final_thresholds"] = list(self.final_thresholds)
        return out


def _infer_classes(stream: Sequence[PredictionBatch]) -> int:
    for batch in stream:
        for d in batch.detections:
            return d.num_classes
    return 0


def evaluate_selection(
    selected: Sequence[PseudoLabelSet],
    stream: Sequence[PredictionBatch],
    num_classes: Optional[int] = None,
    label: str = "",
) -> EvalReport:
    if len(selected) != len(stream):
        raise StreamMismatch(f"{len(selected)} selections for {len(stream)} images")
    if num_classes is None:
        num_classes = _infer_classes(stream)
    metrics = [ClassMetrics() for _ in range(num_classes)]
    for labels, batch in zip(selected, stream):
        if labels.image_id != batch.image_id:
            raise StreamMismatch(f"image id {labels.image_id!r} does not match stream {batch.image_id!r}")
        for d in batch.detections:
            metrics[argmax_class(d)[0]].dropped += 1
            if d.truth is not None and d.truth >= 0:
                metrics[d.truth].total_correct += 1
        for l in labels.labels:
            m = metrics[l.assigned_class]
            m.kept += 1
            m.dropped -= 1
            if l.detection.truth == l.assigned_class:
                m.kept_correct += 1
            else:
                m.kept_false += 1
    return EvalReport(metrics, label)


def sweep_static_thresholds(
    stream: Sequence[PredictionBatch],
    thresholds: Sequence[float],
    num_classes: Optional[int] = None,
) -> List[EvalReport]:
    """One global threshold on the argmax-class score for every class."""
    if num_classes is None:
        num_classes = _infer_classes(stream)
    reports = []
    for delta in thresholds:
        per_class = [delta] * num_classes
        selected = [select_with_thresholds(b, per_class) for b in stream]
        reports.append(evaluate_selection(selected, stream, num_classes, label=f"static@{delta:g}"))
    return reports


def run_caps_experiment(stream: Sequence[PredictionBatch], state: ThresholdState) -> Tuple[EvalReport, np.ndarray]:
    selected, final, trajectory = run_caps(stream, state)
    report = evaluate_selection(selected, stream, state.num_classes, label="caps")
    report.final_thresholds = list(final.per_class)
    report.trajectory = trajectory
    return report, trajectory


def class_counts(stream: Sequence[PredictionBatch]) -> Dict[str, int]:
    correct = sum(1 for b in stream for d in b.detections if d.truth is not None and d.truth >= 0)
    total = sum(len(b) for b in stream)
    return {"images": len(stream), "detections": total, "correct": correct, "false_positive": total - correct}


@dataclass(frozen=True)
class Scenario:
    """Everything ``simulate`` needs: the class profiles, stream size and
    seed, the CAPS hyperparameters, and the static thresholds to compare."""

    profiles: Tuple[ClassProfile, ...]
    num_images: int = 1000
    image_size: Tuple[int, int] = (640, 640)
    seed: int = 0
    delta_t: float = 0.2
    delta_0: float = 0.8
    alpha_t: float = 0.9999
    beta_start: float = 1.0
    beta_end: float = 0.85
    num_bins: int = 20
    static_thresholds: Tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)

    def initial_state(self) -> ThresholdState:
        return ThresholdState.initial(
            len(self.profiles),
            self.delta_0,
            delta_t=self.delta_t,
            alpha_t=self.alpha_t,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            total_iters=max(1, self.num_images),
            num_bins=self.num_bins,
        )

    def to_dict(self) -> dict:
        return {
            "profiles": [p.to_dict() for p in self.profiles],
            "num_images": self.num_images,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "caps": {
                "delta_t": self.delta_t,
                "delta_0": self.delta_0,
                "alpha_t": self.alpha_t,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
                "M": self.num_bins,
            },
            "static_thresholds": list(self.static_thresholds),
        }


def run_scenario(scenario: Scenario) -> Tuple[dict, np.ndarray]:
    """CAPS against every static threshold on one generated stream.

    Returns the JSON-ready report and the CAPS threshold trajectory.
    """
    stream = generate_stream(scenario.profiles, scenario.num_images, scenario.image_size, scenario.seed)
    num_classes = len(scenario.profiles)
    caps, trajectory = run_caps_experiment(stream, scenario.initial_state())
    static = sweep_static_thresholds(stream, scenario.static_thresholds, num_classes)
    scored = [r for r in static if r.macro_f1 is not None]
    best = max(scored, key=lambda r: r.macro_f1, default=None)
    margin = None
    if best is not None and caps.macro_f1 is not None:
        margin = caps.macro_f1 - best.macro_f1
    report = {
        "rng": RNG_ALGORITHM,
        "scenario": scenario.to_dict(),
        "stream": class_counts(stream),
        "caps": caps.to_dict(),
        "static": [r.to_dict() for r in static],
        "best_static": best.label if best is not None else None,
        "caps_margin_over_best_static": margin,
    }
    return report, trajectory
