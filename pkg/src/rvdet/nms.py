"""Adaptive non-maximum suppression driven by predicted box scales."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxgeom import OrientedBox, box_from_corners, rotated_iou
from .errors import FormatError, InvalidInputError
from .mixture import likelihood_score


class NmsMode(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True, eq=False)
class Detection:
    class_id: int
    corners: np.ndarray
    sigma: float
    alpha: float
    score: float = float("nan")

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("detection sigma must be positive")
        object.__setattr__(self, "corners", np.asarray(self.corners, dtype=float).reshape(8))
        if np.isnan(self.score):
            object.__setattr__(self, "score", likelihood_score(self.alpha, self.sigma))

    @property
    def box(self) -> OrientedBox:
        return box_from_corners(self.corners)

    def with_sigma(self, sigma: float) -> "Detection":
        return replace(self, sigma=sigma, score=likelihood_score(self.alpha, sigma))


@dataclass(frozen=True)
class NmsConfig:
    mode: NmsMode = NmsMode.HARD
    widths: dict = field(default_factory=lambda: {1: 2.0})
    default_width: float = 2.0
    fixed_threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", NmsMode(self.mode))
        if self.default_width <= 0 or any(w <= 0 for w in self.widths.values()):
            raise InvalidInputError("mean widths must be positive")

    def width(self, class_id: int) -> float:
        return self.widths.get(class_id, self.default_width)


def adaptive_threshold(sigma1: float, sigma2: float, width: float) -> float:
    """Largest IoU two side-by-side boxes of width ``width`` may show given their scales."""
    s = sigma1 + sigma2
    if s < width:
        return s / (2.0 * width - s)
    return 1.0


def inflated_sigma(sigma_low: float, sigma_keep: float, iou: float, width: float) -> float:
    """Scale for the weaker box so that the adaptive threshold equals ``iou``."""
    return max(sigma_low, 2.0 * width * iou / (1.0 + iou) - sigma_keep)


def _radius(c: np.ndarray) -> np.ndarray:
    p = c.reshape(-1, 4, 2)
    return np.linalg.norm(p - p.mean(axis=1, keepdims=True), axis=2).max(axis=1)


def _order(dets) -> list:
    # stable: ties broken by input index
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def run_nms(dets, cfg: NmsConfig) -> list:
    """Suppress (hard) or down-weight (soft) overlapping same-class detections.

    Output is sorted by score, descending.
    """
    dets = list(dets)
    if not dets:
        return []
    order = _order(dets)
    sorted_dets = [dets[i] for i in order]
    C = np.array([d.corners for d in sorted_dets])
    centers = C.reshape(-1, 4, 2).mean(axis=1)
    rad = _radius(C)
    cls = np.array([d.class_id for d in sorted_dets])
    sig = np.array([d.sigma for d in sorted_dets], dtype=float)
    alive = np.ones(len(sorted_dets), dtype=bool)

    # per class, detections sorted by center x so overlap candidates form a window
    by_x = {}
    for c in np.unique(cls):
        members = np.flatnonzero(cls == c)
        members = members[np.argsort(centers[members, 0], kind="stable")]
        by_x[c] = (members, centers[members, 0], rad[members].max())

    for i in range(len(sorted_dets)):
        if not alive[i]:
            continue
        members, xs, max_rad = by_x[cls[i]]
        reach = rad[i] + max_rad
        lo, hi = np.searchsorted(xs, [centers[i, 0] - reach, centers[i, 0] + reach], side="left")
        cand = members[lo:hi]
        cand = np.sort(cand[(cand > i) & alive[cand]])
        near = cand[np.linalg.norm(centers[cand] - centers[i], axis=1) < rad[cand] + rad[i]]
        w = cfg.width(int(cls[i]))
        if cfg.fixed_threshold is not None:
            thr = np.full(near.size, float(cfg.fixed_threshold))
        else:
            s = sig[i] + sig[near]
            thr = np.where(s < w, s / (2.0 * w - np.minimum(s, w)), 1.0)
        # IoU never exceeds 1, so pairs at threshold >= 1 cannot be affected
        for j, t in zip(near[thr < 1.0], thr[thr < 1.0]):
            iou = rotated_iou(C[i], C[j])
            if iou <= t:
                continue
            if cfg.mode is NmsMode.HARD:
                alive[j] = False
            else:
                sig[j] = inflated_sigma(sig[j], sig[i], iou, w)

    out = [
        d if sig[k] == d.sigma else d.with_sigma(float(sig[k]))
        for k, d in enumerate(sorted_dets)
        if alive[k]
    ]
    if cfg.mode is NmsMode.SOFT:
        out = [out[i] for i in _order(out)]
    return out


# -- detection file ----------------------------------------------------------

DET_MAGIC = b"RVDT"
DET_VERSION = 1
_DET_HEADER = struct.Struct("<4sHIH")
DET_DTYPE = np.dtype(
    [("cls", "<u2"), ("corners", "<f4", (8,)), ("sigma", "<f4"), ("alpha", "<f4"), ("score", "<f4")]
)


def write_detections(path, dets, frame_id: int = 0, class_names=("background", "vehicle")):
    names = [n.encode() for n in class_names]
    rec = np.zeros(len(dets), dtype=DET_DTYPE)
    for k, d in enumerate(dets):
        rec[k] = (d.class_id, d.corners, d.sigma, d.alpha, d.score)
    with open(path, "wb") as f:
        f.write(_DET_HEADER.pack(DET_MAGIC, DET_VERSION, frame_id, len(names)))
        for n in names:
            f.write(struct.pack("<H", len(n)) + n)
        f.write(struct.pack("<I", len(dets)))
        f.write(rec.tobytes())


def read_detections(path):
    """Returns ``(frame_id, class_names, detections)``."""
    data = Path(path).read_bytes()
    try:
        magic, version, frame_id, n_names = _DET_HEADER.unpack_from(data)
        if magic != DET_MAGIC or version != DET_VERSION:
            raise FormatError(f"{path}: not a version-{DET_VERSION} detection file")
        off = _DET_HEADER.size
        names = []
        for _ in range(n_names):
            (ln,) = struct.unpack_from("<H", data, off)
            names.append(data[off + 2: off + 2 + ln].decode())
            off += 2 + ln
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
    except struct.error as exc:
        raise FormatError(f"{path}: truncated detection header") from exc
    body = data[off:]
    if len(body) != count * DET_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {count} detection records")
    rec = np.frombuffer(body, dtype=DET_DTYPE)
    dets = [
        Detection(int(r["cls"]), r["corners"].astype(float), float(r["sigma"]), float(r["alpha"]), float(r["score"]))
        for r in rec
    ]
    return frame_id, names, dets
