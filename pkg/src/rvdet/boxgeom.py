"""Top-down oriented boxes: point-relative encoding, corners and rotated IoU.

A box is described either as an :class:`OrientedBox` (center, yaw, length,
width) or as a flat corner vector ``[x1, y1, x2, y2, x3, y3, x4, y4]`` with
corners ordered front-left, front-right, rear-right, rear-left in the box
frame (x along the length axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# 2x4 corner signs in the box frame, multiplied by (l/2, w/2).
CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])

DEGENERATE_AREA = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def angle_diff(a, b):
    """Wrapped difference a - b in (-pi, pi]."""
    return wrap_angle(np.asarray(a) - np.asarray(b))


@dataclass(frozen=True)
class BoxParams:
    dx: float
    dy: float
    wx: float
    wy: float
    length: float
    width: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.wx, self.wy, self.length, self.width])


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    yaw: float
    length: float
    width: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.yaw, self.length, self.width)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box {vals}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.length * self.width

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.yaw, self.length, self.width])


def _rot(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def decode_box(point_xy, azimuth: float, params: BoxParams) -> OrientedBox:
    """Absolute box from a point's position/azimuth and its relative params."""
    vals = (*np.asarray(point_xy, dtype=float), azimuth, *params.as_array())
    if not all(math.isfinite(v) for v in vals):
        raise InvalidInputError("decode_box got non-finite input")
    center = np.asarray(point_xy, dtype=float) + _rot(azimuth) @ np.array([params.dx, params.dy])
    yaw = azimuth + math.atan2(params.wy, params.wx)
    return OrientedBox(center[0], center[1], yaw, params.length, params.width)


def encode_box(point_xy, azimuth: float, box: OrientedBox) -> BoxParams:
    """Inverse of :func:`decode_box` (orientation returned as a unit vector)."""
    d = _rot(azimuth).T @ (box.center - np.asarray(point_xy, dtype=float))
    rel = box.yaw - azimuth
    return BoxParams(d[0], d[1], math.cos(rel), math.sin(rel), box.length, box.width)


def corners(box: OrientedBox) -> np.ndarray:
    """Flat corner vector (8,) of ``box``."""
    half = CORNER_SIGNS * np.array([box.length, box.width]) * 0.5
    pts = box.center + half @ _rot(box.yaw).T
    return pts.reshape(8)


def box_from_corners(b) -> OrientedBox:
    """Recover an :class:`OrientedBox` from a (possibly fused) corner vector."""
    p = np.asarray(b, dtype=float).reshape(4, 2)
    center = p.mean(axis=0)
    front = 0.5 * (p[0] + p[1]) - center
    left = 0.5 * (p[0] + p[3]) - center
    return OrientedBox(
        center[0],
        center[1],
        math.atan2(front[1], front[0]),
        2.0 * math.hypot(*front),
        2.0 * math.hypot(*left),
    )


# -- vectorized forms used by the detection pipeline and the losses ----------


def decode_boxes(xy: np.ndarray, azimuth: np.ndarray, params: np.ndarray):
    """Vectorized decode.

    ``xy`` is (..., 2), ``azimuth`` (...), ``params`` (..., 6). Returns
    ``(centers (..., 2), yaw (...), length (...), width (...))``.
    """
    c, s = np.cos(azimuth), np.sin(azimuth)
    dx, dy = params[..., 0], params[..., 1]
    centers = np.stack([xy[..., 0] + c * dx - s * dy, xy[..., 1] + s * dx + c * dy], axis=-1)
    yaw = azimuth + np.arctan2(params[..., 3], params[..., 2])
    return centers, yaw, params[..., 4], params[..., 5]


def box_axes(centers: np.ndarray, yaw: np.ndarray, length: np.ndarray, width: np.ndarray) -> np.ndarray:
    """(..., 6) rows of center, half-length axis and half-width axis; corners are linear in these."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    out = np.empty(np.shape(yaw) + (6,))
    out[..., 0] = centers[..., 0]
    out[..., 1] = centers[..., 1]
    out[..., 2] = c * hl
    out[..., 3] = s * hl
    out[..., 4] = -s * hw
    out[..., 5] = c * hw
    return out


def corners_from_axes(axes: np.ndarray) -> np.ndarray:
    cx, cy, ax, ay, bx, by = (axes[..., i] for i in range(6))
    out = np.empty(axes.shape[:-1] + (8,))
    out[..., 0] = cx + ax + bx
    out[..., 1] = cy + ay + by
    out[..., 2] = cx + ax - bx
    out[..., 3] = cy + ay - by
    out[..., 4] = cx - ax - bx
    out[..., 5] = cy - ay - by
    out[..., 6] = cx - ax + bx
    out[..., 7] = cy - ay + by
    return out


def corners_array(centers: np.ndarray, yaw: np.ndarray, length: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Vectorized corners, returns (..., 8)."""
    return corners_from_axes(box_axes(centers, yaw, length, width))


def encode_boxes(xy: np.ndarray, azimuth: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Vectorized encode. ``boxes`` rows are (cx, cy, yaw, l, w)."""
    c, s = np.cos(azimuth), np.sin(azimuth)
    ex = boxes[..., 0] - xy[..., 0]
    ey = boxes[..., 1] - xy[..., 1]
    rel = boxes[..., 2] - azimuth
    return np.stack(
        [c * ex + s * ey, -s * ex + c * ey, np.cos(rel), np.sin(rel), boxes[..., 3], boxes[..., 4]],
        axis=-1,
    )


# -- rotated IoU -------------------------------------------------------------


def polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    a = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        a += x1 * y2 - x2 * y1
    return 0.5 * a


def _ccw(poly):
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clipping of convex ``subject`` by convex ``clipper``.

    Both polygons are lists of (x, y) in counter-clockwise order.
    """
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _as_poly(box) -> list:
    b = corners(box) if isinstance(box, OrientedBox) else np.asarray(box, dtype=float)
    return _ccw([(float(b[2 * i]), float(b[2 * i + 1])) for i in range(4)])


@dataclass(frozen=True)
class IoUResult:
    iou: float
    degenerate: bool = False


def rotated_iou_ex(a, b) -> IoUResult:
    """Rotated IoU of two boxes given as :class:`OrientedBox` or corner vectors."""
    pa, pb = _as_poly(a), _as_poly(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a < DEGENERATE_AREA or area_b < DEGENERATE_AREA:
        return IoUResult(0.0, True)
    inter = polygon_area(clip_convex(pa, pb))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return IoUResult(min(inter / union, 1.0))


def rotated_iou(a, b) -> float:
    # symmetric by construction: clip order is canonicalized
    if _order_key(a) > _order_key(b):
        a, b = b, a
    return rotated_iou_ex(a, b).iou


def _order_key(box):
    b = corners(box) if isinstance(box, OrientedBox) else np.asarray(box, dtype=float)
    return tuple(b.tolist())
