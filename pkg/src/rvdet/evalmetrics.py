"""BEV average precision (with range buckets) and corner-CDF calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxgeom import rotated_iou
from .mixture import laplace_cdf

DEFAULT_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, 70.0))


@dataclass
class MatchResult:
    """Greedy matching for one frame and one class.

    ``det_gt[i]`` is the ground-truth index matched by detection ``i`` or -1.
    """

    scores: np.ndarray
    tp: np.ndarray
    det_gt: np.ndarray
    gt_matched: np.ndarray
    det_range: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gt_range: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_gt(self) -> int:
        return len(self.gt_matched)

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp


def _corners_of(x):
    return x.corners if hasattr(x, "corners") else np.asarray(x, dtype=float)


def _center_range(c) -> float:
    p = np.asarray(c, dtype=float).reshape(4, 2).mean(axis=0)
    return float(math.hypot(p[0], p[1]))


def _circles(boxes):
    if not boxes:
        return np.zeros((0, 2)), np.zeros(0)
    p = np.array(boxes, dtype=float).reshape(-1, 4, 2)
    c = p.mean(axis=1)
    return c, np.linalg.norm(p - c[:, None, :], axis=2).max(axis=1)


def match_detections(dets, gts, iou_threshold: float, scores=None) -> MatchResult:
    """Greedy matching in descending score order (ties by detection index).

    ``dets`` are objects with ``corners``/``score`` or corner vectors paired
    with ``scores``; ``gts`` are corner vectors or objects with ``corners``.
    """
    dets = list(dets)
    gts = [_corners_of(g) for g in gts]
    if scores is None:
        scores = [d.score for d in dets]
    scores = np.asarray(scores, dtype=float)
    dc = [_corners_of(d) for d in dets]
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    det_gt = np.full(len(dets), -1, dtype=np.int64)
    taken = np.zeros(len(gts), dtype=bool)
    gc, gr = _circles(gts)
    dcen, drad = _circles(dc)
    for i in order:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or math.dist(dcen[i], gc[j]) >= drad[i] + gr[j]:
                continue
            iou = rotated_iou(dc[i], g)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            tp[i] = True
            det_gt[i] = best
    return MatchResult(
        scores,
        tp,
        det_gt,
        taken,
        np.array([_center_range(c) for c in dc]),
        np.array([_center_range(g) for g in gts]),
    )


def pr_curve(scores, tp, num_gt: int):
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def interpolated_ap(recall, precision, points: int = 41) -> float:
    """Mean over ``points`` equally spaced recall levels (0 and 1 included) of the
    best precision achieved at recall >= that level."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    total = 0.0
    for r in np.linspace(0.0, 1.0, points):
        ok = recall >= r - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return total / points


def average_precision(matches, points: int = 41):
    """AP over a list of :class:`MatchResult` pooled across frames; ``None`` without ground truth."""
    matches = list(matches)
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        return None
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, dtype=bool)
    if scores.size == 0:
        return 0.0
    recall, precision = pr_curve(scores, tp, num_gt)
    return interpolated_ap(recall, precision, points)


def _restrict(m: MatchResult, lo: float, hi: float) -> MatchResult:
    gt_in = (m.gt_range > lo) & (m.gt_range <= hi)
    own = (m.det_range > lo) & (m.det_range <= hi)
    matched_in = np.array([m.det_gt[i] >= 0 and gt_in[m.det_gt[i]] for i in range(len(m.tp))], dtype=bool)
    det_in = np.where(m.det_gt >= 0, matched_in, own)
    return MatchResult(m.scores[det_in], m.tp[det_in], m.det_gt[det_in], m.gt_matched[gt_in],
                       m.det_range[det_in], m.gt_range[gt_in])


def range_bucketed_ap(matches, buckets=DEFAULT_BUCKETS, points: int = 41) -> dict:
    """AP per (lo, hi] bucket. Ground truths go by center range; detections by
    their matched ground truth, or their own center range when unmatched."""
    matches = list(matches)
    return {
        (lo, hi): average_precision([_restrict(m, lo, hi) for m in matches], points)
        for lo, hi in buckets
    }


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationCurve:
    expected: np.ndarray
    observed: np.ndarray
    samples: int

    def max_deviation(self) -> float:
        if self.samples == 0:
            return float("nan")
        return float(np.max(np.abs(self.observed - self.expected)))

    def __len__(self):
        return len(self.expected)


def corner_cdf_values(pred_corners, sigma, gt_corners) -> np.ndarray:
    """Pooled Laplace CDF of every ground-truth corner coordinate."""
    pred = np.asarray(pred_corners, dtype=float).reshape(-1, 8)
    gt = np.asarray(gt_corners, dtype=float).reshape(-1, 8)
    s = np.asarray(sigma, dtype=float).reshape(-1, 1)
    return laplace_cdf(gt, pred, s).reshape(-1)


def calibration_curve(pred_corners, sigma, gt_corners, quantiles=None) -> CalibrationCurve:
    """Expected-vs-observed CDF over matched (prediction, ground truth) pairs."""
    if quantiles is None:
        quantiles = np.linspace(0.0, 1.0, 101)
    q = np.asarray(quantiles, dtype=float)
    if np.size(pred_corners) == 0:
        return CalibrationCurve(np.zeros(0), np.zeros(0), 0)
    u = np.sort(corner_cdf_values(pred_corners, sigma, gt_corners))
    observed = np.searchsorted(u, q, side="right") / u.size
    return CalibrationCurve(q, observed, u.size)


def ks_uniform(u) -> float:
    """Kolmogorov-Smirnov distance of samples in [0, 1] from the uniform law."""
    u = np.sort(np.asarray(u, dtype=float))
    n = u.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - u), np.max(u - (i - 1) / n)))


# -- report output ------------------------------------------------------------


def write_report(path, metrics: dict):
    lines = [f"{k} = {'nan' if v is None else repr(float(v))}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = float(v)
    return out


def write_xy(path, x, y, header: str = "x y"):
    np.savetxt(path, np.column_stack([x, y]), header=header, comments="# ")
