"""Saliency matrices rasterized from boxes, and the feature reweighting they drive.

A grid cell ``(u, v)`` at stride ``s`` belongs to a box when its pixel
center ``((v + 0.5) * s, (u + 0.5) * s)`` lies inside the box (edges
inclusive). Overlapping boxes resolve to the larger confidence.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .caps import PseudoLabelSet
from .detection import BBox
from .errors import BoxOutsideGrid, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureMap:
    stride: int
    tensor: np.ndarray  # (C, H, W)

    def __post_init__(self):
        t = np.asarray(self.tensor)
        if t.ndim != 3:
            raise ShapeMismatch(f"feature tensor must be C x H x W, got shape {t.shape}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        object.__setattr__(self, "tensor", t)

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class SaliencyMatrix:
    stride: int
    grid: np.ndarray  # (H, W), entries in [0, 1]
    skipped: int = 0  # boxes that covered no cell center

    @property
    def shape(self):
        return self.grid.shape


def grid_shape(image_size: Tuple[int, int], stride: int) -> Tuple[int, int]:
    """(H, W) of a feature map covering ``image_size = (width, height)``."""
    w, h = image_size
    return math.ceil(h / stride), math.ceil(w / stride)


def rasterize_boxes(boxes: Iterable[Tuple[BBox, float]], stride: int, grid: Tuple[int, int]) -> SaliencyMatrix:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    H, W = grid
    out = np.zeros((H, W), dtype=np.float64)
    cy = (np.arange(H) + 0.5) * stride
    cx = (np.arange(W) + 0.5) * stride
    skipped = 0
    for box, value in boxes:
        rows = np.flatnonzero((cy >= box.y1) & (cy <= box.y2))
        cols = np.flatnonzero((cx >= box.x1) & (cx <= box.x2))
        if rows.size == 0 or cols.size == 0:
            skipped += 1
            continue
        # contiguous by construction
        window = out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        np.maximum(window, value, out=window)
    if skipped:
        warnings.warn(f"{skipped} box(es) cover no cell at stride {stride}", BoxOutsideGrid, stacklevel=3)
    return SaliencyMatrix(stride, out, skipped)


def rasterize_saliency(labels: PseudoLabelSet, stride: int, grid: Tuple[int, int]) -> SaliencyMatrix:
    return rasterize_boxes(((l.detection.bbox, l.detection.conf) for l in labels), stride, grid)


def saliency_from_ground_truth(boxes: Sequence[BBox], stride: int, grid: Tuple[int, int]) -> SaliencyMatrix:
    return rasterize_boxes(((b, 1.0) for b in boxes), stride, grid)


def _check_pair(f: FeatureMap, m: SaliencyMatrix):
    if f.stride != m.stride:
        raise ShapeMismatch(f"stride mismatch: features {f.stride}, saliency {m.stride}")
    if f.tensor.shape[1:] != m.grid.shape:
        raise ShapeMismatch(f"grid mismatch: features {f.tensor.shape[1:]}, saliency {m.grid.shape}")


def reweight_features(f: FeatureMap, m: SaliencyMatrix) -> FeatureMap:
    """``m * f + f`` with ``m`` broadcast across channels."""
    _check_pair(f, m)
    t = f.tensor
    return FeatureMap(f.stride, m.grid[None, :, :] * t + t)


def reweight_backward(grad_reweighted: np.ndarray, m: SaliencyMatrix) -> np.ndarray:
    """Chain rule through the reweighting: dL/df = (1 + m) * dL/d(reweighted).

    Written as a single product so the ``m == 0`` case returns the input
    gradient bit for bit.
    """
    g = np.asarray(grad_reweighted)
    if g.shape[1:] != m.grid.shape:
        raise ShapeMismatch(f"grid mismatch: gradient {g.shape[1:]}, saliency {m.grid.shape}")
    return (1.0 + m.grid)[None, :, :] * g
