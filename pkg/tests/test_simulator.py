import math

import numpy as np
import pytest

from oracles import confusion_counts, f1_from_counts, linear_argmax
from vteacher.caps import PseudoLabel, PseudoLabelSet, ThresholdState, select_with_thresholds
from vteacher.detection import FALSE_POSITIVE, BBox, Detection, PredictionBatch
from vteacher.errors import InvalidProfile, StreamMismatch
from vteacher.simulator import (
    ClassProfile,
    ConfDist,
    evaluate_selection,
    generate_stream,
    run_caps_experiment,
    sweep_static_thresholds,
)

EASY = ClassProfile(0, ConfDist("beta", 40, 8), ConfDist("beta", 2, 6))
HARD = ClassProfile(1, ConfDist("beta", 12, 8), ConfDist("beta", 2, 6))


def select_mask(stream, masks):
    out = []
    for b, mask in zip(stream, masks):
        labels = []
        for d, keep in zip(b.detections, mask):
            if keep:
                c = linear_argmax(d.class_scores)
                labels.append(PseudoLabel(d, c, tuple(int(i == c) for i in range(d.num_classes))))
        out.append(PseudoLabelSet(b.image_id, tuple(labels)))
    return out


class TestGenerate:
    def test_zero_rates_give_empty_batches(self):
        p = ClassProfile(0, ConfDist(), ConfDist(), tp_rate=0, fp_rate=0)
        assert all(len(b) == 0 for b in generate_stream([p], 50))

    def test_deterministic(self):
        a = generate_stream([EASY, HARD], 30, seed=7)
        b = generate_stream([EASY, HARD], 30, seed=7)
        assert a == b
        assert a != generate_stream([EASY, HARD], 30, seed=8)

    def test_prefix_stable(self):
        # per-image substreams: a shorter stream is a prefix of a longer one
        assert generate_stream([EASY], 10, seed=3) == generate_stream([EASY], 20, seed=3)[:10]

    def test_poisson_mean(self):
        p = ClassProfile(0, ConfDist(), ConfDist(), tp_rate=2, fp_rate=0)
        stream = generate_stream([p], 10_000, seed=1)
        mean = sum(len(b) for b in stream) / len(stream)
        assert abs(mean - 2) < 3 * math.sqrt(2 / len(stream))

    def test_detections_well_formed(self):
        stream = generate_stream([EASY, HARD], 100, image_size=(320, 200), seed=2)
        for b in stream:
            for d in b.detections:
                assert 0 <= d.bbox.x1 <= d.bbox.x2 <= 320
                assert 0 <= d.bbox.y1 <= d.bbox.y2 <= 200
                assert d.truth in (FALSE_POSITIVE, 0, 1)
                assert 0 <= d.conf <= 1
                assert max(d.class_scores) == d.conf

    def test_uniform_support(self):
        p = ClassProfile(0, ConfDist("uniform", 0.3, 0.4), ConfDist("uniform", 0.1, 0.2))
        confs = [d.conf for b in generate_stream([p], 200) for d in b.detections]
        assert all(0.1 <= c <= 0.4 for c in confs)

    @pytest.mark.parametrize(
        "profile",
        [
            ClassProfile(0, ConfDist("beta", 0, 1), ConfDist()),
            ClassProfile(0, ConfDist("uniform", 0.5, 1.5), ConfDist()),
            ClassProfile(0, ConfDist("gamma", 1, 1), ConfDist()),
            ClassProfile(0, ConfDist(), ConfDist(), tp_rate=-1),
            ClassProfile(0, ConfDist(), ConfDist(), box_size_range=(0, 10)),
            ClassProfile(1, ConfDist(), ConfDist()),
        ],
    )
    def test_invalid_profile(self, profile):
        with pytest.raises(InvalidProfile):
            generate_stream([profile], 1)


class TestEvaluate:
    stream = generate_stream([EASY, HARD], 60, seed=4)

    def test_select_all(self):
        masks = [[True] * len(b) for b in self.stream]
        agg = evaluate_selection(select_mask(self.stream, masks), self.stream).aggregate
        base = sum(d.truth >= 0 for b in self.stream for d in b.detections) / sum(len(b) for b in self.stream)
        assert agg.recall == 1.0
        assert agg.precision == pytest.approx(base, rel=1e-12)
        assert agg.dropped == 0

    def test_select_nothing(self):
        masks = [[False] * len(b) for b in self.stream]
        rep = evaluate_selection(select_mask(self.stream, masks), self.stream)
        assert rep.aggregate.recall == 0.0
        assert rep.aggregate.precision is None
        assert rep.aggregate.f1 is None
        assert rep.macro_f1 == 0.0

    def test_random_mask_matches_oracle(self):
        rng = np.random.default_rng(5)
        stream = generate_stream([EASY, HARD], 50, seed=5)
        assert sum(len(b) for b in stream) >= 200
        masks = [list(rng.random(len(b)) < 0.5) for b in stream]
        rep = evaluate_selection(select_mask(stream, masks), stream)
        kept, good, total = confusion_counts(stream, masks, 2)
        for c, m in enumerate(rep.per_class):
            assert (m.kept, m.kept_correct, m.total_correct) == (kept[c], good[c], total[c])
            assert m.f1 == f1_from_counts(kept[c], good[c], total[c])

    def test_counts_consistent(self):
        rng = np.random.default_rng(6)
        masks = [list(rng.random(len(b)) < 0.3) for b in self.stream]
        rep = evaluate_selection(select_mask(self.stream, masks), self.stream)
        agg = rep.aggregate
        assert agg.kept_correct + agg.kept_false == agg.kept
        assert agg.kept + agg.dropped == sum(len(b) for b in self.stream)
        assert agg.kept == sum(m.kept for m in rep.per_class)
        for m in rep.per_class:
            for v in (m.precision, m.recall, m.f1):
                assert v is None or 0 <= v <= 1

    def test_stream_mismatch(self):
        with pytest.raises(StreamMismatch):
            evaluate_selection([], self.stream)
        wrong = [PseudoLabelSet("other", ())] + [PseudoLabelSet(b.image_id, ()) for b in self.stream[1:]]
        with pytest.raises(StreamMismatch):
            evaluate_selection(wrong, self.stream)


class TestStaticSweep:
    stream = generate_stream([EASY, HARD], 40, seed=9)

    def test_zero_threshold_is_select_all(self):
        everything = evaluate_selection(select_mask(self.stream, [[True] * len(b) for b in self.stream]), self.stream)
        [zero] = sweep_static_thresholds(self.stream, [0.0])
        assert zero.to_dict()["per_class"] == everything.to_dict()["per_class"]

    def test_impossible_threshold_selects_nothing(self):
        [rep] = sweep_static_thresholds(self.stream, [1.0 + 1e-9])
        assert rep.aggregate.kept == 0

    def test_fifty_detection_fixture(self):
        # hand-built: 25 detections per class with fixed scores and truths
        rng = np.random.default_rng(10)
        dets = []
        for c in (0, 1):
            for j in range(25):
                conf = round(float(rng.uniform(0.3, 1.0)), 3)
                scores = [0.0, 0.0]
                scores[c] = conf
                truth = c if j % 3 else FALSE_POSITIVE
                dets.append(Detection(BBox(0, 0, 8, 8), tuple(scores), conf, truth))
        stream = [PredictionBatch(f"f{i}", tuple(dets[i * 5:(i + 1) * 5])) for i in range(10)]
        thresholds = [0.5, 0.6, 0.7, 0.8, 0.9]
        for delta, rep in zip(thresholds, sweep_static_thresholds(stream, thresholds, 2)):
            masks = [[d.class_scores[linear_argmax(d.class_scores)] >= delta for d in b.detections] for b in stream]
            kept, good, total = confusion_counts(stream, masks, 2)
            for c in (0, 1):
                assert rep.per_class[c].f1 == f1_from_counts(kept[c], good[c], total[c])


class TestCapsExperiment:
    def test_empty_stream(self):
        p = ClassProfile(0, ConfDist(), ConfDist(), tp_rate=0, fp_rate=0)
        stream = generate_stream([p, ClassProfile(1, ConfDist(), ConfDist(), 0, 0)], 20)
        s0 = ThresholdState.initial(2, 0.8, total_iters=20)
        rep, traj = run_caps_experiment(stream, s0)
        assert rep.final_thresholds == [0.8, 0.8]
        assert traj.shape == (21, 2) and np.all(traj == 0.8)
        assert rep.aggregate.kept == 0 and rep.macro_f1 is None

    def test_fixed_point(self):
        p = ClassProfile(0, ConfDist("uniform", 0.801, 0.849), ConfDist("uniform", 0.05, 0.35), tp_rate=8, fp_rate=0)
        stream = generate_stream([p], 3000, seed=11)
        s0 = ThresholdState.initial(1, 0.8, alpha_t=0.999, beta_start=1.0, beta_end=1.0, total_iters=3000)
        _, traj = run_caps_experiment(stream, s0)
        err = np.abs(traj[:, 0] - 0.85)
        assert np.all(np.diff(err) <= 1e-15)
        assert err[-1] < 0.05 * 0.999 ** 2900

    def test_class_aware_ordering(self):
        stream = generate_stream([EASY, HARD], 1500, seed=12)
        s0 = ThresholdState.initial(2, 0.8, alpha_t=0.995, beta_start=0.8, beta_end=0.7, total_iters=1500)
        rep, _ = run_caps_experiment(stream, s0)
        easy, hard = rep.final_thresholds
        assert easy - hard > 0.05

    def test_reproducible_report(self):
        s0 = ThresholdState.initial(2, 0.8, total_iters=50)
        a, _ = run_caps_experiment(generate_stream([EASY, HARD], 50, seed=13), s0)
        b, _ = run_caps_experiment(generate_stream([EASY, HARD], 50, seed=13), s0)
        assert a.to_dict() == b.to_dict()

    def test_selection_uses_updated_threshold(self):
        stream = generate_stream([EASY], 5, seed=14)
        s0 = ThresholdState.initial(1, 0.8, total_iters=5)
        rep, traj = run_caps_experiment(stream, s0)
        kept = sum(len(select_with_thresholds(b, traj[i + 1])) for i, b in enumerate(stream))
        assert rep.aggregate.kept == kept
