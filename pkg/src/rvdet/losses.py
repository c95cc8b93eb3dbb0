"""Training objective with analytic gradients.

The total loss is the focal classification loss averaged over all image
points plus the regression loss: for each object point, a Laplace NLL on
the corners of the best-matching (hindsight) mixture component, plus a
weighted cross entropy that teaches the mixture weights which component
won. Per-point regression terms are divided by the point count of their
object and by the number of objects.

Every differentiable stage (head decoding, corner construction, cluster
fusion, the loss terms) comes as a vector-Jacobian product so the full
gradient w.r.t. the raw head outputs is accumulated by hand. Cluster
membership and the selected component are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxgeom import CORNER_SIGNS, corners_array, decode_boxes
from .errors import InvalidInputError
from .meanshift import cluster
from .mixture import (
    BOX_SLICE,
    LOGSCALE,
    PARAMS_PER_COMPONENT,
    WEIGHT_LOGIT,
    _components,
    head_size,
    log_softmax,
    softmax,
)

EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    C: int = 2
    K: tuple = (3,)
    mix_weight: float = 0.25
    gamma: float = 2.0
    fusion: bool = True
    log_inside_sum: bool = True
    iterations: int = 3
    bin_size: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(_components(self.C, self.K)))
        if self.mix_weight < 0 or self.gamma < 0:
            raise InvalidInputError("mix_weight and gamma must be non-negative")


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    total: float
    prob: np.ndarray
    box: np.ndarray  # per point, NaN on background
    mix: np.ndarray
    selected: np.ndarray  # -1 on background
    P: int
    N: int
    n_points: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)
    # distance to the nearest non-smooth point: smallest |corner residual|
    # of a selected component, smallest gap between best and runner-up component
    min_residual: float = math.inf
    selection_gap: float = math.inf


# -- individual terms --------------------------------------------------------


def focal_loss(probs, label: int, gamma: float = 2.0) -> float:
    p = max(float(np.asarray(probs)[label]), EPS)
    return -((1.0 - p) ** gamma) * math.log(p)


def focal_vjp(logits: np.ndarray, labels: np.ndarray, gamma: float):
    """Per-point focal loss of softmax(logits) and its gradient w.r.t. logits."""
    probs = softmax(logits)
    n = len(labels)
    p_raw = probs[np.arange(n), labels]
    clamped = p_raw < EPS
    p = np.maximum(p_raw, EPS)
    q = 1.0 - p
    loss = -(q ** gamma) * np.log(p)
    if gamma == 0:
        dl_dp = -1.0 / p
    else:
        dl_dp = gamma * q ** (gamma - 1.0) * np.log(p) - q ** gamma / p
    dl_dp = np.where(clamped, 0.0, dl_dp)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    grad = (dl_dp * p_raw)[:, None] * (onehot - probs)
    return loss, grad


def select_component(fused_means, gt) -> int:
    """Index of the component whose corner vector is closest to ``gt`` (first on ties)."""
    d = np.linalg.norm(np.asarray(fused_means, dtype=float) - np.asarray(gt, dtype=float), axis=-1)
    return int(np.argmin(d))


def box_loss(bhat, sigma: float, gt, log_inside_sum: bool = True) -> float:
    e = np.abs(np.asarray(bhat, dtype=float) - np.asarray(gt, dtype=float))
    n_log = e.size if log_inside_sum else 1
    return float(e.sum() / sigma + n_log * math.log(sigma))


def box_loss_vjp(bhat: np.ndarray, sigma: np.ndarray, gt: np.ndarray, log_inside_sum: bool = True):
    """Batched Laplace corner NLL; returns (loss, d/d bhat, d/d sigma)."""
    diff = bhat - gt
    e = np.abs(diff)
    n_log = bhat.shape[-1] if log_inside_sum else 1
    loss = e.sum(axis=-1) / sigma + n_log * np.log(sigma)
    g_b = np.sign(diff) / sigma[..., None]
    g_s = -e.sum(axis=-1) / sigma ** 2 + n_log / sigma
    return loss, g_b, g_s


def mixture_ce_vjp(weight_logits: np.ndarray, selected: np.ndarray):
    n = len(selected)
    loss = -log_softmax(weight_logits)[np.arange(n), selected]
    g = softmax(weight_logits)
    g[np.arange(n), selected] -= 1.0
    return loss, g


def regression_loss(box_losses, mix_losses, n_points, N: int, mix_weight: float = 0.25) -> float:
    box_losses = np.asarray(box_losses, dtype=float)
    if box_losses.size == 0:
        return 0.0
    if N < 1:
        raise InvalidInputError("object points present but N < 1")
    n_points = np.asarray(n_points, dtype=float)
    if np.any(n_points < 1):
        raise InvalidInputError("n_i must be >= 1")
    return float(np.sum((box_losses + mix_weight * np.asarray(mix_losses, dtype=float)) / n_points) / N)


# -- geometry vjps -----------------------------------------------------------


def box_corners_from_params(xy, theta, params):
    centers, yaw, length, width = decode_boxes(xy, theta, params)
    return corners_array(centers, yaw, length, width)


def corners_vjp(xy: np.ndarray, theta: np.ndarray, params: np.ndarray, g_corners: np.ndarray) -> np.ndarray:
    """Pull a gradient on (n, 8) corners back to the (n, 6) relative box params."""
    _, yaw, length, width = decode_boxes(xy, theta, params)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    sx, sy = CORNER_SIGNS[:, 0], CORNER_SIGNS[:, 1]
    hx = 0.5 * length[:, None] * sx
    hy = 0.5 * width[:, None] * sy
    gx, gy = g_corners[:, 0::2], g_corners[:, 1::2]

    g_cx = gx.sum(axis=1)
    g_cy = gy.sum(axis=1)
    g_yaw = (gx * (-s * hx - c * hy) + gy * (c * hx - s * hy)).sum(axis=1)
    g_l = (gx * c * 0.5 * sx + gy * s * 0.5 * sx).sum(axis=1)
    g_w = (gx * (-s) * 0.5 * sy + gy * c * 0.5 * sy).sum(axis=1)

    ct, st = np.cos(theta), np.sin(theta)
    wx, wy = params[:, 2], params[:, 3]
    r2 = wx * wx + wy * wy
    out = np.empty_like(params)
    out[:, 0] = g_cx * ct + g_cy * st
    out[:, 1] = -g_cx * st + g_cy * ct
    out[:, 2] = g_yaw * (-wy / r2)
    out[:, 3] = g_yaw * (wx / r2)
    out[:, 4] = g_l
    out[:, 5] = g_w
    return out


def fuse_forward(corners: np.ndarray, log_scale: np.ndarray, labels: np.ndarray, n_clusters: int):
    w = np.exp(-2.0 * log_scale)
    W = np.bincount(labels, weights=w, minlength=n_clusters)
    num = np.stack([np.bincount(labels, weights=w * corners[:, n], minlength=n_clusters) for n in range(8)], axis=1)
    bhat = num / W[:, None]
    return bhat, W ** -0.5, w, W


def fuse_vjp(corners, log_scale, labels, n_clusters, g_bhat, g_sigma):
    """Gradients of per-cluster (bhat, sigma_hat) w.r.t. member corners and log-scales.

    ``g_bhat`` (n_clusters, 8) and ``g_sigma`` (n_clusters,) are upstream.
    """
    bhat, _, w, W = fuse_forward(corners, log_scale, labels, n_clusters)
    Wm = W[labels]
    g_b = (w / Wm)[:, None] * g_bhat[labels]
    g_w = ((corners - bhat[labels]) * g_bhat[labels]).sum(axis=1) / Wm - 0.5 * Wm ** -1.5 * g_sigma[labels]
    return g_b, g_w * (-2.0 * w)


# -- full objective ----------------------------------------------------------


@dataclass(frozen=True)
class LossTargets:
    """Per-point targets aligned with the raw predictions.

    ``boxes`` rows are (cx, cy, yaw, l, w); they are ignored on background
    points (label 0 / object id -1).
    """

    labels: np.ndarray
    object_ids: np.ndarray
    boxes: np.ndarray
    xy: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.object_ids) == len(self.boxes) == len(self.xy) == len(self.theta) == n):
            raise InvalidInputError("targets are misaligned")

    @property
    def n_points(self) -> np.ndarray:
        """Points on each point's object (0 for background)."""
        out = np.zeros(len(self.labels), dtype=np.int64)
        fg = self.object_ids >= 0
        if fg.any():
            _, inv, cnt = np.unique(self.object_ids[fg], return_inverse=True, return_counts=True)
            out[fg] = cnt[inv.reshape(-1)]
        return out

    @property
    def num_objects(self) -> int:
        return int(np.unique(self.object_ids[self.object_ids >= 0]).size)


def default_clusters(raw: np.ndarray, targets: LossTargets, cfg: LossConfig) -> dict:
    """Mean-shift labels per (class, component) stream over that class's object points."""
    out = {}
    off = cfg.C
    for ci, K in enumerate(cfg.K):
        c = ci + 1
        idx = np.flatnonzero(targets.labels == c)
        blk = raw[idx, off: off + K * PARAMS_PER_COMPONENT].reshape(-1, K, PARAMS_PER_COMPONENT)
        for k in range(K):
            centers, _, _, _ = decode_boxes(targets.xy[idx], targets.theta[idx], blk[:, k, BOX_SLICE])
            a = cluster(centers, iterations=cfg.iterations, dx=cfg.bin_size, dy=cfg.bin_size)
            out[(c, k)] = a.labels
        off += K * PARAMS_PER_COMPONENT
    return out


def pipeline_loss(raw, targets: LossTargets, cfg: LossConfig, clusters: dict | None = None,
                  with_grad: bool = True) -> LossBreakdown:
    """Total loss over one image and (optionally) its gradient w.r.t. ``raw``.

    With ``cfg.fusion`` each point's component box is replaced by the fused
    box of its cluster before component selection and the box loss.
    ``clusters`` maps (class, component) to labels over that class's object
    points; computed by mean shift when omitted.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != len(targets.labels):
        raise InvalidInputError("raw predictions and targets are misaligned")
    if raw.shape[1] != head_size(cfg.C, cfg.K):
        raise InvalidInputError("raw head size does not match the loss config")
    P = raw.shape[0]
    grad = np.zeros_like(raw) if with_grad else None

    prob_loss, g_logits = focal_vjp(raw[:, : cfg.C], targets.labels, cfg.gamma)
    L_cls = float(prob_loss.sum() / P) if P else 0.0
    if with_grad and P:
        grad[:, : cfg.C] = g_logits / P

    n_pts = targets.n_points
    N = targets.num_objects
    box = np.full(P, np.nan)
    mix = np.full(P, np.nan)
    selected = np.full(P, -1, dtype=np.int64)
    L_reg = 0.0
    min_res, min_gap = math.inf, math.inf
    if cfg.fusion and clusters is None:
        clusters = default_clusters(raw, targets, cfg)

    off = cfg.C
    for ci, K in enumerate(cfg.K):
        c = ci + 1
        cols = slice(off, off + K * PARAMS_PER_COMPONENT)
        off += K * PARAMS_PER_COMPONENT
        idx = np.flatnonzero(targets.labels == c)
        if idx.size == 0:
            continue
        if np.any(targets.object_ids[idx] < 0):
            raise InvalidInputError("foreground point without an object id")
        n = idx.size
        blk = raw[idx, cols].reshape(n, K, PARAMS_PER_COMPONENT)
        xy, th = targets.xy[idx], targets.theta[idx]
        gt = corners_array(targets.boxes[idx, :2], targets.boxes[idx, 2], targets.boxes[idx, 3], targets.boxes[idx, 4])

        per_k = []
        bhat = np.empty((n, K, 8))
        shat = np.empty((n, K))
        for k in range(K):
            cor = box_corners_from_params(xy, th, blk[:, k, BOX_SLICE])
            if cfg.fusion:
                lab = np.asarray(clusters[(c, k)])
                nc = int(lab.max()) + 1
                fb, fs, _, _ = fuse_forward(cor, blk[:, k, LOGSCALE], lab, nc)
                bhat[:, k], shat[:, k] = fb[lab], fs[lab]
            else:
                lab, nc = None, 0
                bhat[:, k], shat[:, k] = cor, np.exp(blk[:, k, LOGSCALE])
            per_k.append((cor, lab, nc))

        dist = np.linalg.norm(bhat - gt[:, None, :], axis=2)
        ks = np.argmin(dist, axis=1)
        rows = np.arange(n)
        min_res = min(min_res, float(np.abs(bhat[rows, ks] - gt).min()))
        if K > 1:
            part = np.partition(dist, 1, axis=1)
            min_gap = min(min_gap, float((part[:, 1] - part[:, 0]).min()))
        lb, gb, gs = box_loss_vjp(bhat[rows, ks], shat[rows, ks], gt, cfg.log_inside_sum)
        lm, gm = mixture_ce_vjp(blk[:, :, WEIGHT_LOGIT], ks)
        coef = 1.0 / (N * n_pts[idx])
        L_reg += float(np.sum(coef * (lb + cfg.mix_weight * lm)))
        box[idx], mix[idx], selected[idx] = lb, lm, ks

        if not with_grad:
            continue
        g_blk = np.zeros_like(blk)
        g_blk[:, :, WEIGHT_LOGIT] = (coef * cfg.mix_weight)[:, None] * gm
        for k, (cor, lab, nc) in enumerate(per_k):
            sel = ks == k
            g_bh = np.where(sel[:, None], coef[:, None] * gb, 0.0)
            g_sh = np.where(sel, coef * gs, 0.0)
            if cfg.fusion:
                G_b = np.stack([np.bincount(lab, weights=g_bh[:, m], minlength=nc) for m in range(8)], axis=1)
                G_s = np.bincount(lab, weights=g_sh, minlength=nc)
                g_cor, g_ls = fuse_vjp(cor, blk[:, k, LOGSCALE], lab, nc, G_b, G_s)
            else:
                g_cor, g_ls = g_bh, g_sh * shat[:, k]
            g_blk[:, k, BOX_SLICE] = corners_vjp(xy, th, blk[:, k, BOX_SLICE], g_cor)
            g_blk[:, k, LOGSCALE] = g_ls
        grad[idx, cols] = g_blk.reshape(n, -1)

    return LossBreakdown(L_cls, L_reg, L_cls + L_reg, prob_loss, box, mix, selected, P, N, n_pts, grad,
                         min_res, min_gap)


# -- finite-difference verification -----------------------------------------


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(f, grad_f, x, h: float = 1e-5, coords=None, floor: float = 1e-5) -> float:
    """Max relative error between ``grad_f(x)`` and central differences of ``f``."""
    x = np.array(x, dtype=float)
    analytic = np.asarray(grad_f(x.copy()), dtype=float)
    numeric = numeric_gradient(f, x, h, coords)
    if coords is not None:
        coords = np.asarray(list(coords))
        analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
    return float(relative_error(analytic, numeric, floor).max(initial=0.0))


# -- seeded gradient-check problems --------------------------------------------

KINK_TOLERANCE = 1e-3


def random_loss_problem(seed: int, cfg: LossConfig | None = None, max_objects: int = 3):
    """Small random image: a few objects of random classes plus background points.

    Component boxes start near the truth so clusters and selections are
    non-trivial. Returns ``(raw, targets, cfg)``.
    """
    from .boxgeom import encode_boxes

    cfg = cfg or LossConfig(C=4, K=(3, 1, 1))
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(1, max_objects + 1))
    labels, ids, boxes = [], [], []
    for o in range(n_obj):
        c = int(rng.integers(1, cfg.C))
        box = [rng.uniform(5, 40), rng.uniform(-15, 15), rng.uniform(-math.pi, math.pi),
               rng.uniform(0.6, 5.0), rng.uniform(0.5, 2.0)]
        m = int(rng.integers(2, 7))
        labels += [c] * m
        ids += [o] * m
        boxes += [box] * m
    n_bg = int(rng.integers(1, 4))
    labels += [0] * n_bg
    ids += [-1] * n_bg
    boxes += [[0.0] * 5] * n_bg
    labels, ids, boxes = np.array(labels), np.array(ids), np.array(boxes)
    P = len(labels)
    xy = boxes[:, :2] + rng.normal(0.0, 0.5, (P, 2))
    xy[labels == 0] = rng.uniform(5, 40, (n_bg, 2))
    theta = np.arctan2(xy[:, 1], xy[:, 0])
    targets = LossTargets(labels, ids, boxes, xy, theta)

    raw = rng.normal(0.0, 1.0, (P, head_size(cfg.C, cfg.K)))
    fg = labels > 0
    enc = np.zeros((P, 6))
    enc[fg] = encode_boxes(xy[fg], theta[fg], boxes[fg])
    off = cfg.C
    for K in cfg.K:
        for k in range(K):
            col = off + k * PARAMS_PER_COMPONENT
            raw[fg, col: col + 6] = enc[fg] + rng.normal(0.0, 0.3, (int(fg.sum()), 6))
            raw[:, col + LOGSCALE] = rng.normal(-0.5, 0.3, P)
        off += K * PARAMS_PER_COMPONENT
    return raw, targets, cfg


@dataclass(frozen=True)
class GradientCheck:
    seed: int
    max_error: float
    kink: bool
    coords: int


def check_loss_gradient(seed: int, fusion: bool = True, h: float = 1e-4, max_coords: int = 250,
                        kink_tolerance: float = KINK_TOLERANCE) -> GradientCheck:
    """Finite-difference check of the total loss on :func:`random_loss_problem`.

    Clusters are frozen from the unperturbed input. A configuration whose
    smallest residual or selection gap is within ``kink_tolerance`` is
    flagged as a kink point; its error is still reported.
    """
    raw, targets, cfg = random_loss_problem(seed, LossConfig(C=4, K=(3, 1, 1), fusion=fusion))
    clusters = default_clusters(raw, targets, cfg) if fusion else None
    res = pipeline_loss(raw, targets, cfg, clusters)
    kink = res.min_residual < kink_tolerance or res.selection_gap < kink_tolerance
    n = raw.size
    coords = None
    if n > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(n, max_coords, replace=False))

    def f(x):
        return pipeline_loss(x, targets, cfg, clusters, with_grad=False).total

    err = gradient_check(f, lambda x: res.grad, raw, h, coords)
    return GradientCheck(seed, err, kink, n if coords is None else len(coords))


def quadratic_self_test(seed: int = 0, n: int = 12, h: float = 1e-3) -> float:
    """Central differences are exact on quadratics, so this bounds the harness error."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    A = A + A.T
    b = rng.normal(size=n)
    x = rng.normal(size=n)
    return gradient_check(lambda v: 0.5 * v @ A @ v + b @ v, lambda v: A @ v + b, x, h)
