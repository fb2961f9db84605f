import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vteacher.caps import PseudoLabel, PseudoLabelSet
from vteacher.detection import BBox, Detection
from vteacher.errors import BoxOutsideGrid, ShapeMismatch
from vteacher.saliency import (
    FeatureMap,
    SaliencyMatrix,
    grid_shape,
    rasterize_boxes,
    rasterize_saliency,
    reweight_backward,
    reweight_features,
    saliency_from_ground_truth,
)


def labels(*items):
    out = []
    for box, conf in items:
        out.append(PseudoLabel(Detection(BBox(*box), [conf], conf), 0, (1,)))
    return PseudoLabelSet("img", tuple(out))


def naive_raster(items, stride, grid):
    H, W = grid
    out = np.zeros(grid)
    for u in range(H):
        for v in range(W):
            cx, cy = (v + 0.5) * stride, (u + 0.5) * stride
            for b, c in items:
                if b.x1 <= cx <= b.x2 and b.y1 <= cy <= b.y2:
                    out[u, v] = max(out[u, v], c)
    return out


class TestRasterize:
    def test_empty(self):
        m = rasterize_saliency(labels(), 32, (2, 2))
        assert m.grid.shape == (2, 2) and not m.grid.any()

    def test_single_cell(self):
        # cell centers are at 16 and 48 px; only (16, 16) is inside the box
        m = rasterize_saliency(labels(((0, 0, 32, 32), 0.9)), 32, (2, 2))
        assert m.grid.tolist() == [[0.9, 0.0], [0.0, 0.0]]

    def test_overlap_takes_max(self):
        m = rasterize_saliency(labels(((0, 0, 64, 32), 0.7), ((30, 0, 64, 64), 0.9)), 32, (2, 2))
        assert m.grid.tolist() == [[0.7, 0.9], [0.0, 0.9]]

    def test_degenerate_box_skipped(self):
        with pytest.warns(BoxOutsideGrid):
            m = rasterize_saliency(labels(((0, 0, 10, 10), 0.9)), 32, (2, 2))
        assert m.skipped == 1 and not m.grid.any()

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            items = []
            for _ in range(int(rng.integers(0, 6))):
                x, y = rng.uniform(0, 120, 2)
                w, h = rng.uniform(1, 80, 2)
                items.append((BBox(x, y, x + w, y + h), float(rng.uniform())))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BoxOutsideGrid)
                got = rasterize_boxes(items, 8, (16, 16)).grid
            assert np.array_equal(got, naive_raster(items, 8, (16, 16)))

    def test_ground_truth_is_one(self):
        m = saliency_from_ground_truth([BBox(0, 0, 39, 39)], 16, (3, 3))
        assert m.grid.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 0]]

    def test_ground_truth_empty(self):
        assert not saliency_from_ground_truth([], 16, (3, 3)).grid.any()

    def test_ground_truth_equals_conf_one(self):
        boxes = [BBox(0, 0, 40, 40), BBox(20, 30, 47, 48)]
        a = saliency_from_ground_truth(boxes, 16, (3, 3)).grid
        b = rasterize_saliency(labels(*[(bb.as_tuple(), 1.0) for bb in boxes]), 16, (3, 3)).grid
        assert np.array_equal(a, b)

    def test_grid_shape(self):
        assert grid_shape((640, 480), 32) == (15, 20)
        assert grid_shape((100, 100), 32) == (4, 4)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200), st.floats(1, 120), st.floats(1, 120), st.floats(0, 1)), max_size=6))
    def test_adding_box_never_decreases(self, raw):
        items = [(BBox(x, y, x + w, y + h), c) for x, y, w, h, c in raw]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoxOutsideGrid)
            before = rasterize_boxes(items[:-1], 16, (16, 16)).grid
            after = rasterize_boxes(items, 16, (16, 16)).grid
        assert np.all(after >= before)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200), st.floats(8, 120), st.floats(8, 120)), min_size=1, max_size=5))
    def test_scale_consistency(self, raw):
        # boxes at least one fine stride wide always contain a fine cell center
        s = 8
        items = [(BBox(x, y, x + w, y + h), 1.0) for x, y, w, h in raw]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoxOutsideGrid)
            fine = rasterize_boxes(items, s, (48, 48)).grid
            coarse = rasterize_boxes(items, 2 * s, (24, 24)).grid
        for u, v in zip(*np.nonzero(coarse)):
            assert fine[2 * u:2 * u + 2, 2 * v:2 * v + 2].any()


class TestReweight:
    def f(self, seed=0, shape=(3, 4, 4)):
        return FeatureMap(8, np.random.default_rng(seed).normal(size=shape))

    def test_zero_is_identity(self):
        f = self.f()
        out = reweight_features(f, SaliencyMatrix(8, np.zeros((4, 4))))
        assert np.array_equal(out.tensor, f.tensor)

    def test_one_doubles(self):
        f = self.f()
        out = reweight_features(f, SaliencyMatrix(8, np.ones((4, 4))))
        assert np.array_equal(out.tensor, 2 * f.tensor)

    def test_matches_loop(self):
        f = self.f(1)
        m = np.random.default_rng(2).uniform(size=(4, 4))
        out = reweight_features(f, SaliencyMatrix(8, m)).tensor
        ref = np.empty_like(f.tensor)
        for c in range(3):
            for u in range(4):
                for v in range(4):
                    ref[c, u, v] = m[u, v] * f.tensor[c, u, v] + f.tensor[c, u, v]
        assert np.array_equal(out, ref)

    def test_amplifies_foreground(self):
        f = self.f(3)
        m = np.random.default_rng(4).uniform(size=(4, 4)) * (np.arange(16).reshape(4, 4) % 3 != 0)
        out = reweight_features(f, SaliencyMatrix(8, m)).tensor
        assert np.all(np.abs(out) >= np.abs(f.tensor))
        strict = (m > 0)[None] & (f.tensor != 0)
        assert np.all(np.abs(out)[strict] > np.abs(f.tensor)[strict])
        assert np.array_equal(out[:, m == 0], f.tensor[:, m == 0])

    def test_linear_in_features(self):
        f = self.f(5)
        m = SaliencyMatrix(8, np.random.default_rng(6).uniform(size=(4, 4)))
        a = 2.5
        lhs = reweight_features(FeatureMap(8, a * f.tensor), m).tensor
        rhs = a * reweight_features(f, m).tensor
        np.testing.assert_allclose(lhs, rhs, rtol=1e-15)

    @pytest.mark.parametrize("m", [SaliencyMatrix(8, np.zeros((4, 5))), SaliencyMatrix(16, np.zeros((4, 4)))])
    def test_shape_mismatch(self, m):
        with pytest.raises(ShapeMismatch):
            reweight_features(self.f(), m)

    def test_backward_scale(self):
        g = np.random.default_rng(7).normal(size=(3, 4, 4))
        m = np.random.default_rng(8).uniform(size=(4, 4))
        out = reweight_backward(g, SaliencyMatrix(8, m))
        assert np.array_equal(out, (1 + m)[None] * g)
        assert np.array_equal(reweight_backward(g, SaliencyMatrix(8, np.zeros((4, 4)))), g)
