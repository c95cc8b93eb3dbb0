"""Approximate mean shift over box centers on a regular top-down bin grid.

Each occupied bin carries a mean and a member set. An iteration updates
every mean synchronously with a Gaussian kernel over the bin and its eight
neighbours (weighted by member counts), then merges bins whose mean left
their cell into the destination cell. Two update backends are provided:
a dictionary-keyed sparse one and a dense shifted-array one; they agree to
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError
from .mixture import fuse_segments

NEIGHBOR_OFFSETS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]


@dataclass(frozen=True)
class BinGrid:
    """Slots are bins; slot arrays never shrink, invalid slots stay zeroed.

    ``parent`` maps a merged slot to the slot it was merged into, so the
    member set of a valid slot is every point whose initial slot resolves
    to it.
    """

    dx: float
    dy: float
    keys: np.ndarray  # (n, 2) int64
    means: np.ndarray  # (n, 2)
    counts: np.ndarray  # (n,) int64
    valid: np.ndarray  # (n,) bool
    point_slot: np.ndarray  # (P,) initial slot per point
    parent: np.ndarray  # (n,) int64

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def resolved_slots(self) -> np.ndarray:
        p = self.parent.copy()
        while True:
            nxt = p[p]
            if np.array_equal(nxt, p):
                break
            p = nxt
        return p[self.point_slot]

    def members(self, slot: int) -> np.ndarray:
        return np.flatnonzero(self.resolved_slots() == slot)

    def member_sets(self) -> dict:
        """Map from bin key to sorted member indices, valid bins only."""
        res = self.resolved_slots()
        order = np.argsort(res, kind="stable")
        bounds = np.searchsorted(res[order], np.arange(len(self.keys) + 1))
        return {
            tuple(self.keys[s]): order[bounds[s]: bounds[s + 1]]
            for s in np.flatnonzero(self.valid)
        }


def bin_keys(xy: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return np.stack([np.floor(xy[:, 0] / dx), np.floor(xy[:, 1] / dy)], axis=1).astype(np.int64)


def init_bins(centers, dx: float = 0.5, dy: float = 0.5) -> BinGrid:
    if not (dx > 0 and dy > 0):
        raise InvalidInputError("bin sizes must be positive")
    xy = np.asarray(centers, dtype=float).reshape(-1, 2)
    keys = bin_keys(xy, dx, dy)
    if len(xy):
        # 1-D encoding keeps the (x, y) lexicographic order and sorts much faster
        lo = keys.min(axis=0)
        span = int(keys[:, 1].max() - lo[1]) + 1
        code = (keys[:, 0] - lo[0]) * span + (keys[:, 1] - lo[1])
        ucode, inv = np.unique(code, return_inverse=True)
        ukeys = np.stack([ucode // span + lo[0], ucode % span + lo[1]], axis=1)
        inv = inv.reshape(-1)
    else:
        ukeys, inv = np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    n = len(ukeys)
    counts = np.bincount(inv, minlength=n).astype(np.int64)
    means = np.stack(
        [np.bincount(inv, weights=xy[:, 0], minlength=n), np.bincount(inv, weights=xy[:, 1], minlength=n)],
        axis=1,
    ).reshape(n, 2)
    if n:
        means /= counts[:, None]
    return BinGrid(
        dx, dy, ukeys, means, counts, np.ones(n, dtype=bool), inv.astype(np.int64), np.arange(n, dtype=np.int64)
    )


def _bandwidth2(grid: BinGrid) -> float:
    return grid.dx ** 2 + grid.dy ** 2


def update_means(grid: BinGrid) -> BinGrid:
    """One synchronous kernel-weighted update, sparse dictionary backend."""
    h2 = _bandwidth2(grid)
    lookup = {tuple(k): s for s, k in enumerate(grid.keys.tolist()) if grid.valid[s]}
    new = grid.means.copy()
    for s in np.flatnonzero(grid.valid):
        ki, kj = grid.keys[s]
        mi = grid.means[s]
        num = np.zeros(2)
        den = 0.0
        for di, dj in NEIGHBOR_OFFSETS:
            t = lookup.get((ki + di, kj + dj))
            if t is None:
                continue
            d = mi - grid.means[t]
            kern = np.exp(-(d @ d) / h2) * grid.counts[t]
            num += kern * grid.means[t]
            den += kern
        new[s] = num / den
    return replace(grid, means=new)


def update_means_dense(grid: BinGrid) -> BinGrid:
    """Same update as :func:`update_means` using shifted dense arrays."""
    idx = np.flatnonzero(grid.valid)
    if idx.size == 0:
        return grid
    h2 = _bandwidth2(grid)
    keys = grid.keys[idx]
    lo = keys.min(axis=0) - 1
    shape = tuple(keys.max(axis=0) - lo + 2)
    gi, gj = (keys - lo).T
    mx = np.zeros(shape)
    my = np.zeros(shape)
    cnt = np.zeros(shape)
    mx[gi, gj] = grid.means[idx, 0]
    my[gi, gj] = grid.means[idx, 1]
    cnt[gi, gj] = grid.counts[idx]

    core = (slice(1, -1), slice(1, -1))
    cx, cy = mx[core], my[core]
    num_x = np.zeros_like(cx)
    num_y = np.zeros_like(cy)
    den = np.zeros_like(cx)
    H, W = shape
    for di, dj in NEIGHBOR_OFFSETS:
        sl = (slice(1 + di, H - 1 + di), slice(1 + dj, W - 1 + dj))
        nx, ny, nc = mx[sl], my[sl], cnt[sl]
        kern = np.exp(-((cx - nx) ** 2 + (cy - ny) ** 2) / h2) * nc
        num_x += kern * nx
        num_y += kern * ny
        den += kern
    new = grid.means.copy()
    ci, cj = gi - 1, gj - 1
    new[idx, 0] = num_x[ci, cj] / den[ci, cj]
    new[idx, 1] = num_y[ci, cj] / den[ci, cj]
    return replace(grid, means=new)


def merge_step(grid: BinGrid) -> BinGrid:
    """Move bins whose mean left their cell; merge on collision.

    Destinations are computed once from the post-update means. Moves are then
    applied in ascending source-key order; a bin moving into an occupied
    cell is merged (count-weighted mean, member union) and invalidated, a bin
    moving into an empty cell takes over that key.
    """
    valid = np.flatnonzero(grid.valid)
    if valid.size == 0:
        return grid
    dest = bin_keys(grid.means[valid], grid.dx, grid.dy)
    moving = np.flatnonzero(np.any(dest != grid.keys[valid], axis=1))
    if moving.size == 0:
        return grid

    keys = grid.keys.copy()
    means = grid.means.copy()
    counts = grid.counts.copy()
    ok = grid.valid.copy()
    parent = grid.parent.copy()
    occupant = {tuple(keys[s]): s for s in valid.tolist()}

    src = valid[moving]
    order = np.lexsort((keys[src, 1], keys[src, 0]))
    for o in order:
        s = int(src[o])
        target = tuple(dest[moving[o]].tolist())
        own = tuple(keys[s].tolist())
        if occupant.get(own) == s:
            del occupant[own]
        t = occupant.get(target)
        if t is None:
            keys[s] = target
            occupant[target] = s
            continue
        total = counts[s] + counts[t]
        means[t] = (means[s] * counts[s] + means[t] * counts[t]) / total
        counts[t] = total
        means[s] = 0.0
        counts[s] = 0
        ok[s] = False
        parent[s] = t
    return replace(grid, keys=keys, means=means, counts=counts, valid=ok, parent=parent)


@dataclass(frozen=True)
class ClusterAssignment:
    """Clusters ordered by final bin key; ``labels[i]`` is point i's cluster."""

    labels: np.ndarray
    means: np.ndarray
    keys: np.ndarray
    fused_corners: np.ndarray | None = None
    fused_sigma: np.ndarray | None = None
    counts: np.ndarray | None = None

    @property
    def num_clusters(self) -> int:
        return len(self.means)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def run_mean_shift(centers, iterations: int = 3, dx: float = 0.5, dy: float = 0.5, backend: str = "dense",
                   on_iteration=None) -> BinGrid:
    """``iterations`` rounds of update + merge. ``on_iteration(grid)`` sees every state."""
    if iterations < 0:
        raise InvalidInputError("iterations must be >= 0")
    update = {"dense": update_means_dense, "sparse": update_means}[backend]
    grid = init_bins(centers, dx, dy)
    if on_iteration:
        on_iteration(grid)
    for _ in range(iterations):
        grid = merge_step(update(grid))
        if on_iteration:
            on_iteration(grid)
    return grid


def assignment_from_grid(grid: BinGrid) -> ClusterAssignment:
    slots = np.flatnonzero(grid.valid)
    order = slots[np.lexsort((grid.keys[slots, 1], grid.keys[slots, 0]))]
    relabel = np.full(len(grid.keys), -1, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    return ClusterAssignment(
        labels=relabel[grid.resolved_slots()],
        means=grid.means[order],
        keys=grid.keys[order],
        counts=grid.counts[order],
    )


def cluster(centers, corners=None, sigma=None, iterations: int = 3, dx: float = 0.5, dy: float = 0.5,
            backend: str = "dense") -> ClusterAssignment:
    """Cluster box centers and, when distributions are given, fuse each cluster.

    ``corners`` (n, 8) and ``sigma`` (n,) are the per-point box distributions
    that belong to ``centers`` (n, 2).
    """
    grid = run_mean_shift(centers, iterations, dx, dy, backend)
    out = assignment_from_grid(grid)
    if corners is None:
        return out
    fc, fs, counts = fuse_segments(np.asarray(corners, dtype=float), np.asarray(sigma, dtype=float),
                                   out.labels, out.num_clusters)
    return replace(out, fused_corners=fc, fused_sigma=fs, counts=counts)
