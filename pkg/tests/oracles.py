"""Independent reference implementations used only by the tests."""

import math
from fractions import Fraction

import numpy as np


def exact_fuse(members):
    """Rational-arithmetic precision-weighted fusion."""
    w = [1 / (Fraction(s) ** 2) for _, s in members]
    W = sum(w)
    mean = [float(sum(wi * Fraction(float(b[n])) for wi, (b, _) in zip(w, members)) / W) for n in range(8)]
    return np.array(mean), math.sqrt(float(1 / W))


def exact_mean_shift(points, bandwidth2, tol=1e-12, max_iter=5000, mode_merge=0.25):
    """Full-kernel mean shift of every point over all points; returns a partition
    as a sorted list of sorted index tuples."""
    pts = np.asarray(points, dtype=float)
    modes = pts.copy()
    for _ in range(max_iter):
        d2 = ((modes[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        k = np.exp(-d2 / bandwidth2)
        new = k @ pts / k.sum(axis=1, keepdims=True)
        done = np.max(np.abs(new - modes)) < tol
        modes = new
        if done:
            break
    groups = []
    for i, m in enumerate(modes):
        for g in groups:
            if np.linalg.norm(modes[g[0]] - m) < mode_merge:
                g.append(i)
                break
        else:
            groups.append([i])
    return canonical_partition(groups)


def canonical_partition(groups):
    return sorted(tuple(sorted(int(i) for i in g)) for g in groups)


def partition_from_labels(labels):
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(int(l), []).append(i)
    return canonical_partition(groups.values())


def separated_groups(rng, max_points=30, spread=0.1, separation=5.0, max_groups=4):
    """Point groups whose centers are at least ``separation`` apart."""
    n_groups = int(rng.integers(1, max_groups + 1))
    centers = []
    while len(centers) < n_groups:
        c = rng.uniform(-30, 30, 2)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    sizes = rng.multinomial(max_points - n_groups, np.ones(n_groups) / n_groups) + 1
    sizes = np.minimum(sizes, max_points)
    pts, truth = [], []
    for g, (c, n) in enumerate(zip(centers, sizes)):
        pts.append(c + rng.normal(0, spread, (n, 2)))
        truth += [g] * n
    return np.vstack(pts), np.array(truth)


def brute_force_ap(scores, tp, num_gt, points=41):
    """Interpolated AP by explicit prefix enumeration."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    prefixes = []
    hits = 0
    for k, i in enumerate(order, start=1):
        hits += bool(tp[i])
        prefixes.append((hits / num_gt, hits / k))
    total = 0.0
    for j in range(points):
        r = j / (points - 1)
        best = 0.0
        for rec, prec in prefixes:
            if rec >= r - 1e-12:
                best = max(best, prec)
        total += best
    return total / points


def brute_force_matching(det_corners, scores, gt_corners, iou_fn, threshold):
    """Greedy matching written as nested loops over a score-sorted list."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    used = set()
    tp = [False] * len(scores)
    for i in order:
        cands = [(iou_fn(det_corners[i], g), -j) for j, g in enumerate(gt_corners) if j not in used]
        cands = [c for c in cands if c[0] >= threshold]
        if cands:
            _, nj = max(cands)
            used.add(-nj)
            tp[i] = True
    return tp


def brute_force_nms(dets, widths, mode, fixed=None, iou_fn=None, default_width=2.0):
    """Every ordered pair in score order, no spatial pruning. Returns (kept indices, final sigmas)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    sig = {i: dets[i].sigma for i in order}
    alive = {i: True for i in order}
    for a, i in enumerate(order):
        if not alive[i]:
            continue
        w = widths.get(dets[i].class_id, default_width)
        for j in order[a + 1:]:
            if not alive[j] or dets[j].class_id != dets[i].class_id:
                continue
            s = sig[i] + sig[j]
            t = fixed if fixed is not None else (s / (2 * w - s) if s < w else 1.0)
            o = iou_fn(dets[i].corners, dets[j].corners)
            if o > t:
                if mode == "hard":
                    alive[j] = False
                else:
                    sig[j] = max(sig[j], 2 * w * o / (1 + o) - sig[i])
    return [i for i in order if alive[i]], sig
