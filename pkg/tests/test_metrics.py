import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoiwsod.annotations import BoundingBox
from hoiwsod.metrics import (Detection, EvalPair, average_precision, iou, mean_average_precision,
                             recall_pairs, tuple_recall)

from conftest import make_record, make_tuple
from oracles import brute_ap, random_instance, raster_iou


def B(*v):
    return BoundingBox(*map(float, v))


class TestIou:
    def test_examples(self):
        assert iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0
        assert iou(B(0, 0, 10, 10), B(20, 20, 30, 30)) == 0.0
        assert iou(B(0, 0, 10, 10), B(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-15)

    def test_touching_edges(self):
        assert iou(B(0, 0, 10, 10), B(10, 0, 20, 10)) == 0.0

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            iou(B(1, 1, 1, 5), B(2, 2, 2, 2))
        assert iou(B(1, 1, 1, 5), B(0, 0, 4, 4)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=8, max_size=8))
    def test_matches_raster_count(self, v):
        a = B(min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
        b = B(min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
        assert iou(a, b) == pytest.approx(raster_iou(a.as_list(), b.as_list()), abs=1e-12)
        assert iou(a, b) == iou(b, a)
        assert iou(a, b) <= min(a.area, b.area) / max(a.area, b.area) + 1e-12


class TestRecall:
    truth = B(0, 0, 10, 10)

    def test_examples(self):
        assert tuple_recall([EvalPair(self.truth, self.truth)] * 3) == 1.0
        pairs = [EvalPair(self.truth, self.truth), EvalPair(B(0, 0, 10, 9), self.truth),
                 EvalPair(B(5, 5, 15, 15), self.truth), EvalPair(None, self.truth)]
        assert tuple_recall(pairs) == 0.5
        assert tuple_recall([EvalPair(None, self.truth)] * 2) == 0.0

    def test_strict_threshold(self):
        # IoU exactly 0.5 is a miss
        assert tuple_recall([EvalPair(B(0, 0, 10, 5), self.truth)]) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            tuple_recall([])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        pairs = [EvalPair(B(0, 0, rng.uniform(1, 10), rng.uniform(1, 10)), self.truth)
                 for _ in range(20)]
        base = tuple_recall(pairs)
        for _ in range(5):
            assert tuple_recall([pairs[i] for i in rng.permutation(20)]) == base

    def test_recall_pairs(self):
        rec = make_record("x", [make_tuple(box=(0, 0, 10, 10)), make_tuple(box=None)])
        pairs = recall_pairs([rec], {("x", 0): B(0, 0, 10, 10)})
        assert len(pairs) == 1 and tuple_recall(pairs) == 1.0


def records_from(truths, cls="ball"):
    return [make_record(img, [make_tuple(cls=cls, box=b) for b in boxes])
            for img, boxes in truths.items()]


def dets_from(dets, cls="ball"):
    return [Detection(cls, s, B(*b), img) for img, s, b in dets]


class TestMap:
    def test_examples(self):
        truth = {"a": [(0, 0, 10, 10)]}
        recs = records_from(truth)
        assert mean_average_precision(dets_from([("a", 0.9, (0, 0, 10, 10))]), recs).mAP == 1.0
        dets = [("a", 0.9, (20, 20, 30, 30)), ("a", 0.5, (0, 0, 10, 10))]
        assert mean_average_precision(dets_from(dets), recs).mAP == 0.5
        assert mean_average_precision([], recs).mAP == 0.0

    def test_classes_without_truth_ignored(self):
        recs = records_from({"a": [(0, 0, 10, 10)]})
        dets = dets_from([("a", 0.9, (0, 0, 10, 10))]) + dets_from([("a", 0.8, (0, 0, 5, 5))], cls="kite")
        res = mean_average_precision(dets, recs)
        assert res.per_class == {"ball": 1.0} and res.mAP == 1.0

    def test_duplicate_detection_is_false_positive(self):
        recs = records_from({"a": [(0, 0, 10, 10)]})
        dets = dets_from([("a", 0.9, (0, 0, 10, 10)), ("a", 0.8, (0, 0, 10, 10))])
        # TP then FP: precision envelope stays 1 up to recall 1
        assert mean_average_precision(dets, recs).mAP == 1.0

    def test_eleven_point(self):
        assert average_precision(np.array([0.0, 1.0]), 1, "11_point") == pytest.approx(0.5)
        with pytest.raises(ValueError):
            average_precision(np.array([1.0]), 1, "trapezoid")

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        dets, truths = random_instance(np.random.default_rng(seed))
        got = mean_average_precision(dets_from(dets), records_from(truths)).mAP
        assert got == pytest.approx(brute_ap(dets, truths), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.floats(-5.0, 5.0))
    def test_score_rescale_invariant(self, seed, scale, shift):
        dets, truths = random_instance(np.random.default_rng(seed))
        # distinct scores so that the ranking is unambiguous
        dets = [(img, i / 10.0 + 0.01, b) for i, (img, _, b) in enumerate(dets)]
        recs = records_from(truths)
        base = mean_average_precision(dets_from(dets), recs).mAP
        moved = [(img, s * scale + shift, b) for img, s, b in dets]
        assert mean_average_precision(dets_from(moved), recs).mAP == base
