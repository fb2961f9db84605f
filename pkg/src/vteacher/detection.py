"""Detection data model: boxes, per-class scores, per-image batches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

from .errors import MalformedDetection

# Value of ``Detection.truth`` for a simulated false positive. Any value >= 0
# means "correct detection of that class".
FALSE_POSITIVE = -1


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    """One teacher prediction.

    ``conf`` is carried explicitly rather than derived from ``class_scores``;
    detectors disagree on whether it is objectness alone or objectness times
    the class probability.
    """

    bbox: BBox
    class_scores: Tuple[float, ...]
    conf: float
    truth: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "class_scores", tuple(float(s) for s in self.class_scores))
        object.__setattr__(self, "conf", float(self.conf))

    @property
    def num_classes(self) -> int:
        return len(self.class_scores)


@dataclass(frozen=True)
class PredictionBatch:
    image_id: str
    detections: Tuple[Detection, ...] = field(default_factory=tuple)
    image_size: Tuple[int, int] = (640, 640)

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "image_size", tuple(self.image_size))

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def with_detections(self, detections: Sequence[Detection]) -> "PredictionBatch":
        return replace(self, detections=tuple(detections))


def _finite(name, value):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise MalformedDetection(name, f"not a number: {value!r}") from None
    if not math.isfinite(v):
        raise MalformedDetection(name, f"non-finite value {v!r}")
    return v


def validate_detection(d: Detection, num_classes: int, image_size: Tuple[float, float]) -> Detection:
    """Check ranges and clamp the box into ``[0, w] x [0, h]``.

    Raises MalformedDetection naming the first offending field.
    """
    w, h = image_size
    if not (w > 0 and h > 0):
        raise MalformedDetection("image_size", f"must be positive, got {image_size!r}")
    x1, y1, x2, y2 = (_finite(n, v) for n, v in zip(("x1", "y1", "x2", "y2"), d.bbox.as_tuple()))
    conf = _finite("conf", d.conf)
    if not 0.0 <= conf <= 1.0:
        raise MalformedDetection("conf", f"out of range [0, 1]: {conf}")
    if len(d.class_scores) != num_classes:
        raise MalformedDetection(
            "class_scores", f"expected {num_classes} scores, got {len(d.class_scores)}"
        )
    for i, s in enumerate(d.class_scores):
        s = _finite(f"class_scores[{i}]", s)
        if not 0.0 <= s <= 1.0:
            raise MalformedDetection(f"class_scores[{i}]", f"out of range [0, 1]: {s}")

    cx1, cx2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
    cy1, cy2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
    if not (cx1 < cx2 and cy1 < cy2):
        raise MalformedDetection("bbox", f"zero area after clamping: {(cx1, cy1, cx2, cy2)}")

    bbox = d.bbox
    if (cx1, cy1, cx2, cy2) != bbox.as_tuple():
        bbox = BBox(cx1, cy1, cx2, cy2)
    if bbox is d.bbox:
        return d
    return replace(d, bbox=bbox)


def validate_batch(batch: PredictionBatch, num_classes: int) -> PredictionBatch:
    w, h = batch.image_size
    if not (w > 0 and h > 0):
        raise MalformedDetection("image_size", f"must be positive, got {batch.image_size!r}")
    return batch.with_detections(
        [validate_detection(d, num_classes, batch.image_size) for d in batch.detections]
    )


def argmax_class(d: Detection) -> Tuple[int, float]:
    """Index and value of the largest class score; ties go to the lowest index."""
    scores = d.class_scores
    if not scores:
        raise ValueError("class_scores is empty")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best, scores[best]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)
