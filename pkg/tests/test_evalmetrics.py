import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_box
from oracles import brute_force_ap, brute_force_matching
from rvdet.boxgeom import OrientedBox, corners, rotated_iou
from rvdet.evalmetrics import (
    DEFAULT_BUCKETS,
    _restrict,
    average_precision,
    calibration_curve,
    corner_cdf_values,
    interpolated_ap,
    ks_uniform,
    match_detections,
    pr_curve,
    range_bucketed_ap,
    read_report,
    write_report,
    write_xy,
)


def box_at(x, y=0.0, yaw=0.0, l=4.0, w=2.0):
    return corners(OrientedBox(x, y, yaw, l, w))


class TestMatching:
    def test_perfect(self):
        gts = [box_at(10), box_at(20)]
        m = match_detections(gts, gts, 0.7, scores=[0.9, 0.8])
        assert m.tp.all() and m.gt_matched.all()
        assert average_precision([m]) == 1.0

    def test_duplicate_counts_once(self):
        g = box_at(10)
        m = match_detections([g, g], [g], 0.7, scores=[0.9, 0.8])
        assert m.tp.tolist() == [True, False]

    def test_threshold_is_inclusive(self):
        g = box_at(10)
        d = box_at(10.5)
        iou = rotated_iou(d, g)
        assert match_detections([d], [g], iou, scores=[1.0]).tp[0]

    def test_empty_inputs(self):
        m = match_detections([], [box_at(5)], 0.5, scores=[])
        assert average_precision([m]) == 0.0
        assert average_precision([match_detections([box_at(5)], [], 0.5, scores=[1.0])]) is None

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gts = [corners(random_box(rng, 6.0)) for _ in range(rng.integers(0, 5))]
        dets = [corners(random_box(rng, 6.0)) for _ in range(rng.integers(0, 8))]
        dets += [g + rng.normal(0, 0.2, 8) for g in gts]
        scores = rng.integers(0, 4, len(dets)).astype(float)  # ties on purpose
        m = match_detections(dets, gts, 0.3, scores=scores)
        want = brute_force_matching(dets, scores, gts, rotated_iou, 0.3)
        assert m.tp.tolist() == want


class TestAP:
    def test_hand_example(self):
        # TP, FP, TP against two ground truths
        ap = average_precision_from([0.9, 0.8, 0.7], [True, False, True], 2)
        assert ap == pytest.approx((21 + 20 * 2 / 3) / 41)
        assert ap == pytest.approx(0.837398, abs=1e-6)

    def test_eleven_points(self):
        r, p = pr_curve([0.9, 0.8, 0.7], [True, False, True], 2)
        assert interpolated_ap(r, p, 11) == pytest.approx((6 + 5 * 2 / 3) / 11)

    @settings(max_examples=80)
    @given(st.integers(0, 10 ** 6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        scores = rng.integers(0, 6, n).astype(float)
        tp = rng.random(n) < 0.5
        num_gt = int(tp.sum() + rng.integers(0, 4)) or 1
        assert average_precision_from(scores, tp, num_gt) == pytest.approx(
            brute_force_ap(scores, tp, num_gt), abs=1e-12)

    @settings(max_examples=50)
    @given(st.integers(0, 10 ** 6))
    def test_monotone_score_transform_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        scores = rng.random(n)
        tp = rng.random(n) < 0.6
        num_gt = int(tp.sum()) + 1
        a = average_precision_from(scores, tp, num_gt)
        b = average_precision_from(np.exp(3 * scores) + 7, tp, num_gt)
        assert a == b

    @settings(max_examples=50)
    @given(st.integers(0, 10 ** 6))
    def test_flipping_tp_to_fp_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        scores = rng.random(n)
        tp = rng.random(n) < 0.6
        if not tp.any():
            return
        num_gt = int(tp.sum()) + 1
        flipped = tp.copy()
        flipped[rng.choice(np.flatnonzero(tp))] = False
        assert average_precision_from(scores, flipped, num_gt) <= average_precision_from(scores, tp, num_gt)

    def test_pooled_across_frames(self):
        g = box_at(10)
        a = match_detections([g], [g], 0.7, scores=[0.9])
        b = match_detections([box_at(40)], [g], 0.7, scores=[0.95])
        assert average_precision([a, b]) == pytest.approx(
            brute_force_ap([0.9, 0.95], [True, False], 2))


def average_precision_from(scores, tp, num_gt):
    r, p = pr_curve(scores, tp, num_gt)
    return interpolated_ap(r, p, 41)


class TestBuckets:
    def test_partition_of_ground_truth(self):
        rng = np.random.default_rng(0)
        gts = [box_at(r * math.cos(a), r * math.sin(a)) for r, a in zip(rng.uniform(5, 69, 30), rng.uniform(-0.7, 0.7, 30))]
        dets = [g + rng.normal(0, 0.05, 8) for g in gts[::2]] + [box_at(25), box_at(45, 10)]
        m = match_detections(dets, gts, 0.5, scores=rng.random(len(dets)))
        buckets = range_bucketed_ap([m])
        parts = [_restrict(m, lo, hi) for lo, hi in DEFAULT_BUCKETS]
        assert sum(p.num_gt for p in parts) == m.num_gt
        assert sum(len(p.tp) for p in parts) == len(m.tp)
        assert set(buckets) == set(DEFAULT_BUCKETS)

    def test_matched_detection_follows_its_ground_truth(self):
        g = box_at(29.9)
        d = box_at(30.2)  # own center is beyond 30 m, its match is not
        m = match_detections([d], [g], 0.5, scores=[1.0])
        res = range_bucketed_ap([m])
        assert res[(0.0, 30.0)] == 1.0 and res[(30.0, 50.0)] is None

    def test_boundary_goes_to_lower_bucket(self):
        g = box_at(30.0)
        m = match_detections([g], [g], 0.7, scores=[1.0])
        res = range_bucketed_ap([m])
        assert res[(0.0, 30.0)] == 1.0 and res[(30.0, 50.0)] is None


class TestCalibration:
    def test_sampled_laplace_is_calibrated(self):
        rng = np.random.default_rng(1)
        n = 12500
        pred = rng.normal(0, 10, (n, 8))
        sig = rng.uniform(0.05, 1.0, n)
        gt = pred + rng.laplace(0, sig[:, None], (n, 8))
        u = corner_cdf_values(pred, sig, gt)
        assert u.size == 10 ** 5
        assert ks_uniform(u) < 0.01
        assert calibration_curve(pred, sig, gt).max_deviation() < 0.01

    def test_exact_prediction_is_half(self):
        pred = np.arange(16.0).reshape(2, 8)
        assert np.all(corner_cdf_values(pred, [1.0, 2.0], pred) == 0.5)

    def test_overconfident_bends_away(self):
        rng = np.random.default_rng(2)
        pred = np.zeros((5000, 8))
        gt = rng.laplace(0, 1.0, (5000, 8))
        curve = calibration_curve(pred, np.full(5000, 0.3), gt)
        low = curve.expected < 0.5
        assert curve.max_deviation() > 0.05
        assert np.all(curve.observed[low & (curve.expected > 0.05)] > curve.expected[low & (curve.expected > 0.05)])

    def test_empty(self):
        c = calibration_curve(np.zeros((0, 8)), np.zeros(0), np.zeros((0, 8)))
        assert c.samples == 0 and math.isnan(c.max_deviation())

    def test_ks_bounds(self):
        assert ks_uniform(np.full(10, 0.5)) == pytest.approx(0.5)
        assert ks_uniform((np.arange(1000) + 0.5) / 1000) == pytest.approx(0.0005)


class TestReport:
    def test_round_trip(self, tmp_path):
        m = {"ap_vehicle": 0.8373983739837398, "frames": 3, "missing": None}
        write_report(tmp_path / "r.txt", m)
        back = read_report(tmp_path / "r.txt")
        assert back["ap_vehicle"] == m["ap_vehicle"] and back["frames"] == 3.0
        assert math.isnan(back["missing"])

    def test_plot_data(self, tmp_path):
        r, p = pr_curve([0.9, 0.8, 0.7], [True, False, True], 2)
        write_xy(tmp_path / "pr.txt", r, p, "recall precision")
        data = np.loadtxt(tmp_path / "pr.txt")
        assert np.allclose(data, np.column_stack([r, p]))
