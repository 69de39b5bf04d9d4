import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctvos.metrics import (
    EvalReport,
    boundary,
    evaluate_corpus,
    evaluate_sequence,
    f_measure,
    j_measure,
    tolerance_radius,
)
from oracles import count_iou, edge_pixels, golden_mask_pairs, pairwise_f

masks = arrays(bool, (10, 12))


def square(h=16, w=16, r0=4, r1=12, c0=4, c1=12):
    m = np.zeros((h, w), bool)
    m[r0:r1, c0:c1] = True
    return m


class TestJ:
    def test_identical(self):
        assert j_measure(square(), square()) == 1.0

    def test_disjoint(self):
        assert j_measure(square(c0=0, c1=4), square(c0=8, c1=12)) == 0.0

    def test_left_half(self):
        full = np.ones((8, 8), bool)
        left = np.zeros((8, 8), bool)
        left[:, :4] = True
        assert j_measure(left, full) == 0.5

    def test_both_empty(self):
        assert j_measure(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            j_measure(np.zeros((4, 4)), np.zeros((4, 5)))

    @settings(max_examples=60, deadline=None)
    @given(masks, masks)
    def test_symmetric_bounded_and_matches_counting(self, a, b):
        j = j_measure(a, b)
        assert j == j_measure(b, a)
        assert 0.0 <= j <= 1.0
        assert j == count_iou(a, b)

    @settings(max_examples=60, deadline=None)
    @given(masks, masks, st.integers(0, 2**16))
    def test_adding_true_foreground_never_hurts(self, pred, gt, seed):
        extra = np.random.default_rng(seed).random(gt.shape) < 0.3
        grown = pred | (gt & extra)
        assert j_measure(grown, gt) >= j_measure(pred, gt)


class TestBoundary:
    def test_square_ring(self):
        b = boundary(square(8, 8, 2, 6, 2, 6))
        assert b.sum() == 12 and not b[3:5, 3:5].any()

    def test_frame_edge_counts(self):
        b = boundary(np.ones((5, 5), bool))
        assert b.sum() == 16 and not b[1:4, 1:4].any()

    @settings(max_examples=40, deadline=None)
    @given(masks)
    def test_matches_loop_oracle(self, m):
        got = {tuple(p) for p in np.argwhere(boundary(m))}
        assert got == set(edge_pixels(m))


class TestF:
    def test_identical(self):
        assert f_measure(square(), square(), 1) == 1.0

    def test_shift_within_tolerance(self):
        assert f_measure(square(c0=5, c1=13), square(), radius=2) == 1.0

    def test_disjoint_distant(self):
        assert f_measure(square(32, 32, 0, 4, 0, 4), square(32, 32, 26, 30, 26, 30), radius=1) == 0.0

    def test_empty_conventions(self):
        z = np.zeros((8, 8), bool)
        assert f_measure(z, z) == 1.0
        assert f_measure(z, square(8, 8, 2, 5, 2, 5)) == 0.0

    def test_default_radius(self):
        assert tolerance_radius(64, 64) == 1
        assert tolerance_radius(480, 854) == 8

    @settings(max_examples=30, deadline=None)
    @given(masks, masks, st.sampled_from([0, 1, 1.5, 2, 3]))
    def test_symmetric_bounded_and_matches_brute_force(self, a, b, radius):
        f = f_measure(a, b, radius)
        assert abs(f - f_measure(b, a, radius)) < 1e-12
        assert 0.0 <= f <= 1.0
        assert abs(f - pairwise_f(a, b, radius)) < 1e-6


@pytest.mark.parametrize("name,pred,gt", golden_mask_pairs(), ids=[p[0] for p in golden_mask_pairs()])
def test_golden_pairs(name, pred, gt):
    assert j_measure(pred, gt) == count_iou(pred, gt)
    for radius in (1, 2):
        assert abs(f_measure(pred, gt, radius) - pairwise_f(pred, gt, radius)) < 1e-6


class TestSequence:
    def _gt(self):
        gt = np.zeros((2, 4, 16, 16), bool)
        gt[0, :, 2:8, 2:8] = True
        gt[1, :, 9:14, 9:14] = True
        return gt

    def test_perfect(self):
        rep = evaluate_sequence(self._gt(), self._gt(), "s")
        assert rep.j_mean == rep.f_mean == rep.g == 1.0

    def test_all_background(self):
        gt = self._gt()
        pred = np.zeros_like(gt)
        pred[:, 0] = gt[:, 0]
        assert evaluate_sequence(pred, gt).j_mean == 0.0

    def test_first_frame_excluded(self):
        gt = self._gt()
        pred = gt.copy()
        pred[:, 0] = False
        assert evaluate_sequence(pred, gt).j_mean == 1.0

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_sequence(self._gt()[:, :3], self._gt())

    def test_g_is_mean(self):
        rep = EvalReport([("a", 1, 0.6, 0.8)])
        assert rep.g == (rep.j_mean + rep.f_mean) / 2
        assert rep.g == pytest.approx(0.7)

    def test_tsv(self):
        rep = evaluate_corpus({"b": (self._gt(), self._gt()), "a": (self._gt(), self._gt())})
        lines = rep.to_tsv().splitlines()
        assert lines[0].split("\t") == ["sequence", "object", "J", "F", "G"]
        assert [l.split("\t")[0] for l in lines[1:]] == ["a", "a", "b", "b", "MEAN"]
        assert lines[-1].split("\t")[2:] == ["1.000000"] * 3
