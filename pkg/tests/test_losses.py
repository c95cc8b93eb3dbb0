import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvdet.boxgeom import encode_boxes
from rvdet.errors import InvalidInputError
from rvdet.losses import (
    LossConfig,
    LossTargets,
    box_corners_from_params,
    box_loss,
    box_loss_vjp,
    check_loss_gradient,
    corners_vjp,
    default_clusters,
    focal_loss,
    focal_vjp,
    fuse_forward,
    fuse_vjp,
    gradient_check,
    mixture_ce_vjp,
    numeric_gradient,
    pipeline_loss,
    quadratic_self_test,
    random_loss_problem,
    regression_loss,
    relative_error,
    select_component,
)
from rvdet.mixture import head_size, softmax


class TestFocal:
    def test_perfect(self):
        assert focal_loss([0.0, 1.0], 1) == 0.0

    def test_gamma_zero_is_cross_entropy(self):
        assert focal_loss([0.3, 0.7], 1, gamma=0) == pytest.approx(-math.log(0.7))

    def test_hand_value(self):
        assert focal_loss([0.5, 0.5], 0, gamma=2) == pytest.approx(0.25 * math.log(2))
        assert focal_loss([0.5, 0.5], 0, gamma=2) == pytest.approx(0.1733, abs=1e-4)

    def test_zero_probability_clamped(self):
        assert math.isfinite(focal_loss([1.0, 0.0], 1))

    def test_monotone_in_true_probability(self):
        ps = np.linspace(0.01, 0.99, 50)
        vals = [focal_loss([1 - p, p], 1) for p in ps]
        assert np.all(np.diff(vals) < 0)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.0])
    def test_vjp(self, gamma):
        rng = np.random.default_rng(0)
        logits = rng.normal(0, 2, (6, 4))
        labels = rng.integers(0, 4, 6)
        loss, grad = focal_vjp(logits, labels, gamma)
        for i in range(6):
            assert loss[i] == pytest.approx(focal_loss(softmax(logits[i]), labels[i], gamma))
        num = numeric_gradient(lambda x: focal_vjp(x, labels, gamma)[0].sum(), logits.copy(), 1e-6)
        assert relative_error(grad, num).max() < 1e-5


class TestSelect:
    def test_single(self):
        assert select_component(np.zeros((1, 8)), np.ones(8)) == 0

    def test_exact_match(self):
        gt = np.arange(8.0)
        cands = np.stack([gt + 1, gt, gt - 0.5])
        assert select_component(cands, gt) == 1

    def test_tie_lowest(self):
        gt = np.zeros(8)
        cands = np.stack([np.full(8, 1.0), np.full(8, -1.0)])
        assert select_component(cands, gt) == 0

    @settings(max_examples=50)
    @given(st.integers(0, 10 ** 6))
    def test_matches_scan_and_isometry(self, seed):
        rng = np.random.default_rng(seed)
        cands = rng.normal(0, 3, (3, 8))
        gt = rng.normal(0, 3, 8)
        best = min(range(3), key=lambda k: (sum((cands[k] - gt) ** 2), k))
        assert select_component(cands, gt) == best
        t = rng.uniform(-3, 3)
        R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        shift = rng.normal(0, 5, 2)
        move = lambda b: (b.reshape(-1, 4, 2) @ R.T + shift).reshape(b.shape)
        assert select_component(move(cands), move(gt[None])[0]) == best


class TestBoxLoss:
    def test_zero(self):
        assert box_loss(np.ones(8), 1.0, np.ones(8)) == 0.0

    def test_hand_value(self):
        assert box_loss(np.full(8, 0.5), 0.5, np.zeros(8)) == pytest.approx(8 - 8 * math.log(2))

    def test_log_outside_switch(self):
        assert box_loss(np.full(8, 0.5), 0.5, np.zeros(8), log_inside_sum=False) == pytest.approx(8 - math.log(2))

    def test_optimal_scale_is_mean_abs_error(self):
        rng = np.random.default_rng(1)
        e = rng.normal(0, 1, 8)
        best = np.abs(e).mean()
        grid = np.linspace(0.2 * best, 3 * best, 2001)
        vals = [box_loss(e, s, np.zeros(8)) for s in grid]
        assert grid[int(np.argmin(vals))] == pytest.approx(best, rel=2e-3)
        assert min(vals) == pytest.approx(8 * (1 + math.log(best)), rel=1e-5)

    def test_hindsight_distance_monotone(self):
        gt = np.zeros(8)
        b = np.full(8, 2.0)
        vals = [box_loss(b * f, 0.7, gt) for f in np.linspace(1, 0, 20)]
        assert np.all(np.diff(vals) <= 0)

    def test_vjp_non_kink(self):
        rng = np.random.default_rng(2)
        b, gt = rng.normal(0, 1, (5, 8)), rng.normal(0, 1, (5, 8))
        s = rng.uniform(0.2, 2, 5)
        _, gb, gs = box_loss_vjp(b, s, gt)
        nb = numeric_gradient(lambda x: box_loss_vjp(x, s, gt)[0].sum(), b.copy(), 1e-5)
        ns = numeric_gradient(lambda x: box_loss_vjp(b, x, gt)[0].sum(), s.copy(), 1e-5)
        assert relative_error(gb, nb).max() < 1e-5
        assert relative_error(gs, ns).max() < 1e-5

    def test_kink_subgradient_zero(self):
        _, gb, _ = box_loss_vjp(np.zeros((1, 8)), np.ones(1), np.zeros((1, 8)))
        assert np.all(gb == 0)


class TestMixtureCE:
    def test_vjp(self):
        rng = np.random.default_rng(3)
        z = rng.normal(0, 2, (7, 3))
        sel = rng.integers(0, 3, 7)
        loss, g = mixture_ce_vjp(z, sel)
        assert np.allclose(loss, -np.log(softmax(z)[np.arange(7), sel]))
        num = numeric_gradient(lambda x: mixture_ce_vjp(x, sel)[0].sum(), z.copy(), 1e-6)
        assert relative_error(g, num).max() < 1e-5

    def test_single_component_zero(self):
        loss, g = mixture_ce_vjp(np.array([[3.7]]), np.array([0]))
        assert loss[0] == 0.0 and g[0, 0] == 0.0


class TestRegression:
    def test_single_point_lambda_zero(self):
        assert regression_loss([2.5], [9.0], [1], 1, 0.0) == 2.5

    def test_equal_losses_cancel(self):
        n = 7
        assert regression_loss([1.3] * n, [0.4] * n, [n] * n, 1, 0.25) == pytest.approx(1.3 + 0.25 * 0.4)

    def test_brute_force_double_loop(self):
        rng = np.random.default_rng(4)
        sizes = [3, 8]
        obj = np.repeat([0, 1], sizes)
        lb, lm = rng.normal(0, 1, 11), rng.uniform(0, 2, 11)
        total = 0.0
        for o, n in enumerate(sizes):
            for i in range(11):
                if obj[i] == o:
                    total += (lb[i] + 0.25 * lm[i]) / n
        assert regression_loss(lb, lm, np.array(sizes)[obj], 2) == pytest.approx(total / 2)

    def test_empty(self):
        assert regression_loss([], [], [], 0) == 0.0

    def test_bad_counts(self):
        with pytest.raises(InvalidInputError):
            regression_loss([1.0], [1.0], [0], 1)


class TestGeometryVjps:
    def test_corners_vjp(self):
        rng = np.random.default_rng(5)
        n = 6
        xy, th = rng.normal(0, 10, (n, 2)), rng.uniform(-3, 3, n)
        p = np.column_stack([rng.normal(0, 1, (n, 4)), rng.uniform(1, 4, (n, 2))])
        g = rng.normal(0, 1, (n, 8))
        analytic = corners_vjp(xy, th, p, g)
        num = numeric_gradient(lambda x: (box_corners_from_params(xy, th, x) * g).sum(), p.copy(), 1e-6)
        assert relative_error(analytic, num).max() < 1e-5

    def test_fuse_vjp(self):
        rng = np.random.default_rng(6)
        n, k = 9, 3
        cor, ls = rng.normal(0, 5, (n, 8)), rng.normal(-0.5, 0.4, n)
        lab = np.array([0, 0, 1, 2, 2, 2, 1, 0, 2])
        gb, gs = rng.normal(0, 1, (k, 8)), rng.normal(0, 1, k)
        f = lambda c, l: (fuse_forward(c, l, lab, k)[0] * gb).sum() + (fuse_forward(c, l, lab, k)[1] * gs).sum()
        a_c, a_l = fuse_vjp(cor, ls, lab, k, gb, gs)
        assert relative_error(a_c, numeric_gradient(lambda x: f(x, ls), cor.copy(), 1e-6)).max() < 1e-5
        assert relative_error(a_l, numeric_gradient(lambda x: f(cor, x), ls.copy(), 1e-6)).max() < 1e-5


def exact_problem(n_per_object=(3, 2)):
    """Raw outputs that decode exactly to the targets, with confident classes."""
    cfg = LossConfig(C=2, K=(1,), fusion=False)
    boxes, ids = [], []
    for o, n in enumerate(n_per_object):
        boxes += [[10 + 5 * o, 2.0, 0.3, 4.0, 1.8]] * n
        ids += [o] * n
    boxes, ids = np.array(boxes), np.array(ids)
    P = len(ids)
    rng = np.random.default_rng(7)
    xy = boxes[:, :2] + rng.normal(0, 0.5, (P, 2))
    th = np.arctan2(xy[:, 1], xy[:, 0])
    t = LossTargets(np.ones(P, dtype=int), ids, boxes, xy, th)
    raw = np.zeros((P, head_size(2, 1)))
    raw[:, 0], raw[:, 1] = -50.0, 50.0
    raw[:, 2:8] = encode_boxes(xy, th, boxes)
    return raw, t, cfg


class TestPipelineLoss:
    def test_zero_for_exact_predictions(self):
        raw, t, cfg = exact_problem()
        res = pipeline_loss(raw, t, cfg)
        assert res.total == pytest.approx(0.0, abs=1e-12)
        assert res.total == res.cls + res.reg

    def test_breakdown_fields(self):
        raw, t, cfg = random_loss_problem(3)
        res = pipeline_loss(raw, t, cfg)
        assert res.P == len(t.labels) and res.N == t.num_objects
        fg = t.labels > 0
        assert np.all(res.selected[fg] >= 0) and np.all(res.selected[~fg] == -1)
        assert np.all(np.isfinite(res.box[fg])) and np.all(np.isnan(res.box[~fg]))
        assert math.isfinite(res.total) and res.total == pytest.approx(res.cls + res.reg, abs=1e-9)

    def test_singleton_clusters_match_fusion_off(self):
        raw, t, _ = random_loss_problem(4)
        on = LossConfig(C=4, K=(3, 1, 1), fusion=True)
        off = LossConfig(C=4, K=(3, 1, 1), fusion=False)
        singles = {}
        for c, K in zip((1, 2, 3), on.K):
            n = int((t.labels == c).sum())
            for k in range(K):
                singles[(c, k)] = np.arange(n)
        a = pipeline_loss(raw, t, on, singles)
        b = pipeline_loss(raw, t, off)
        assert a.total == pytest.approx(b.total, rel=1e-12)
        assert np.allclose(a.grad, b.grad, rtol=1e-10, atol=1e-14)

    def test_default_clusters_used(self):
        raw, t, cfg = random_loss_problem(5)
        a = pipeline_loss(raw, t, cfg)
        b = pipeline_loss(raw, t, cfg, default_clusters(raw, t, cfg))
        assert a.total == b.total

    def test_misaligned(self):
        raw, t, cfg = random_loss_problem(6)
        with pytest.raises(InvalidInputError):
            pipeline_loss(raw[:-1], t, cfg)
        with pytest.raises(InvalidInputError):
            pipeline_loss(raw[:, :-1], t, cfg)

    def test_gradient_direction(self):
        raw, t, cfg = random_loss_problem(8)
        res = pipeline_loss(raw, t, cfg)
        cl = default_clusters(raw, t, cfg)
        step = raw - 1e-6 * res.grad
        assert pipeline_loss(step, t, cfg, cl, with_grad=False).total < res.total

    def test_no_objects(self):
        P = 4
        t = LossTargets(np.zeros(P, dtype=int), np.full(P, -1), np.zeros((P, 5)), np.ones((P, 2)), np.zeros(P))
        raw = np.random.default_rng(0).normal(size=(P, head_size(2, 3)))
        res = pipeline_loss(raw, t, LossConfig())
        assert res.reg == 0.0 and res.N == 0
        assert np.all(res.grad[:, 2:] == 0)


class TestGradientCheck:
    def test_quadratic(self):
        assert quadratic_self_test() < 1e-9

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-10)[()] == pytest.approx(1e-5)
        assert relative_error(2.0, 1.0)[()] == pytest.approx(0.5)

    def test_coords_subset(self):
        f = lambda x: float((x ** 3).sum())
        g = lambda x: 3 * x ** 2
        assert gradient_check(f, g, np.array([0.5, 1.0, 2.0]), 1e-5, coords=[0, 2]) < 1e-8

    @pytest.mark.parametrize("fusion", [True, False])
    def test_random_problems(self, fusion):
        for seed in range(5):
            r = check_loss_gradient(seed, fusion=fusion)
            if not r.kink:
                assert r.max_error < 1e-4

    def test_problem_is_deterministic(self):
        a, ta, _ = random_loss_problem(9)
        b, tb, _ = random_loss_problem(9)
        assert np.array_equal(a, b) and np.array_equal(ta.xy, tb.xy)
