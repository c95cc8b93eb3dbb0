"""Synthetic scenes, planar LiDAR raycasting and oracle predictions.

The simulator is 2.5D: every laser casts the same horizontal ray per azimuth
column, the horizontal hit distance ``t`` is converted to a slant range
``t / cos(elevation)``, and height follows from the elevation. Objects are
footprints on a flat ground plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxgeom import OrientedBox, corners, encode_boxes
from .errors import InvalidInputError
from .losses import LossTargets
from .mixture import PARAMS_PER_COMPONENT, head_size
from .rangeview import ImagePoints, RangeImage, SensorConfig, Sweep, image_points


@dataclass(frozen=True)
class ClassSpec:
    name: str
    components: int
    mean_width: float
    height: float
    length_range: tuple
    width_range: tuple
    iou_threshold: float


DEFAULT_CLASSES = (
    ClassSpec("vehicle", 3, 2.0, 1.6, (3.8, 5.2), (1.7, 2.1), 0.7),
    ClassSpec("pedestrian", 1, 0.7, 1.7, (0.6, 0.9), (0.6, 0.8), 0.5),
    ClassSpec("bike", 1, 0.7, 1.5, (1.6, 1.9), (0.6, 0.8), 0.5),
)


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int  # 1-based; 0 is background
    box: OrientedBox
    height: float = 1.6


@dataclass(frozen=True)
class Scene:
    objects: tuple = ()
    seed: int | None = None
    generator: dict = field(default_factory=dict)

    def to_dict(self, class_table=DEFAULT_CLASSES) -> dict:
        return {
            "seed": self.seed,
            "generator": self.generator,
            "objects": [
                {
                    "class": class_table[o.class_id - 1].name,
                    "x": o.box.cx,
                    "y": o.box.cy,
                    "yaw": o.box.yaw,
                    "l": o.box.length,
                    "w": o.box.width,
                    "height": o.height,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, class_table=DEFAULT_CLASSES) -> "Scene":
        names = {c.name: i + 1 for i, c in enumerate(class_table)}
        objs = []
        for o in d.get("objects", []):
            if o["class"] not in names:
                raise InvalidInputError(f"unknown class {o['class']!r}")
            cid = names[o["class"]]
            box = OrientedBox(float(o["x"]), float(o["y"]), float(o.get("yaw", 0.0)), float(o["l"]), float(o["w"]))
            objs.append(GroundTruthObject(cid, box, float(o.get("height", class_table[cid - 1].height))))
        return cls(tuple(objs), d.get("seed"), d.get("generator", {}))

    def save(self, path, class_table=DEFAULT_CLASSES):
        Path(path).write_text(json.dumps(self.to_dict(class_table), indent=2))

    @classmethod
    def load(cls, path, class_table=DEFAULT_CLASSES) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()), class_table)

    def boxes(self) -> np.ndarray:
        return np.array([o.box.as_array() for o in self.objects]).reshape(-1, 5)


# -- raycasting ---------------------------------------------------------------


def ray_hits(scene: Scene, azimuths: np.ndarray):
    """Nearest horizontal hit distance and object index per ray (inf / -1 on miss)."""
    n = len(azimuths)
    if not scene.objects:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    pts = np.array([corners(o.box).reshape(4, 2) for o in scene.objects])  # (O, 4, 2)
    p = pts.reshape(-1, 2)
    e = (np.roll(pts, -1, axis=1) - pts).reshape(-1, 2)
    owner = np.repeat(np.arange(len(scene.objects)), 4)
    d = np.stack([np.cos(azimuths), np.sin(azimuths)], axis=1)

    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    cross_pe = p[:, 0] * e[:, 1] - p[:, 1] * e[:, 0]
    cross_pd = p[None, :, 0] * d[:, None, 1] - p[None, :, 1] * d[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_pe[None, :] / denom
        u = cross_pd / denom
    hit = (np.abs(denom) > 1e-15) & (u >= 0.0) & (u <= 1.0) & (t > 0.0)
    t = np.where(hit, t, np.inf)
    best = np.argmin(t, axis=1)
    dist = t[np.arange(n), best]
    obj = np.where(np.isfinite(dist), owner[best], -1)
    return dist, obj


def raycast_sweep(scene: Scene, cfg: SensorConfig, range_noise: float = 0.0, seed: int | None = None,
                  reflectance: float = 0.5) -> Sweep:
    """One return per (laser, column) whose ray hits a footprint within range."""
    az = cfg.column_centers()
    dist, _ = ray_hits(scene, az)
    cols = np.flatnonzero(np.isfinite(dist))
    if cols.size == 0:
        return Sweep.empty()
    el = cfg.elevation_array
    m = np.repeat(np.arange(cfg.laser_count), cols.size)
    col = np.tile(cols, cfg.laser_count)
    r = dist[col] / np.cos(el[m])
    if range_noise > 0:
        r = r + np.random.default_rng(seed).normal(0.0, range_noise, r.size)
    keep = (r > 0) & (r <= cfg.max_range)
    return Sweep.from_arrays(r[keep], np.full(int(keep.sum()), reflectance), az[col[keep]], m[keep])


# -- targets ------------------------------------------------------------------


@dataclass(frozen=True)
class SceneTargets:
    points: ImagePoints
    labels: np.ndarray
    object_ids: np.ndarray
    boxes: np.ndarray  # (P, 5) gt box per point, zeros on background
    params: np.ndarray  # (P, 6) encoded gt, zeros on background

    @property
    def n_points(self) -> np.ndarray:
        return self.loss_targets().n_points

    def loss_targets(self) -> LossTargets:
        return LossTargets(self.labels, self.object_ids, self.boxes, self.points.xy, self.points.theta)

    def object_point_counts(self, n_objects: int) -> np.ndarray:
        ids = self.object_ids[self.object_ids >= 0]
        return np.bincount(ids, minlength=n_objects)


def points_in_box(xy: np.ndarray, box: OrientedBox, tol: float = 1e-3) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = xy - box.center
    u = rel[:, 0] * c + rel[:, 1] * s
    v = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(u) <= 0.5 * box.length + tol) & (np.abs(v) <= 0.5 * box.width + tol)


def encode_targets(img: RangeImage, cfg: SensorConfig, scene: Scene) -> SceneTargets:
    pts = image_points(img, cfg)
    P = len(pts)
    labels = np.zeros(P, dtype=np.int64)
    ids = np.full(P, -1, dtype=np.int64)
    boxes = np.zeros((P, 5))
    for k, obj in enumerate(scene.objects):
        inside = points_in_box(pts.xy, obj.box) & (ids < 0)
        labels[inside] = obj.class_id
        ids[inside] = k
        boxes[inside] = obj.box.as_array()
    params = np.zeros((P, 6))
    fg = ids >= 0
    params[fg] = encode_boxes(pts.xy[fg], pts.theta[fg], boxes[fg])
    return SceneTargets(pts, labels, ids, boxes, params)


# -- oracle predictions -------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    center: float = 0.0
    orientation: float = 0.0
    dimension: float = 0.0
    sigma_factor: float = 1.0  # 1.0 is truthful; anything else misreports
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if min(self.center, self.orientation, self.dimension) < 0:
            raise InvalidInputError("noise standard deviations must be non-negative")
        if self.sigma_factor <= 0 or self.sigma_floor <= 0:
            raise InvalidInputError("sigma factor and floor must be positive")

    def truthful_sigma(self, length, width):
        """Laplace scale with the same mean absolute corner error as the noise.

        Per-coordinate corner variance is approximated as
        center^2 + orientation^2 (l^2 + w^2) / 8 + dimension^2 / 4.
        """
        var = self.center ** 2 + self.orientation ** 2 * (length ** 2 + width ** 2) / 8 + self.dimension ** 2 / 4
        return np.maximum(math.sqrt(2.0 / math.pi) * np.sqrt(var), self.sigma_floor)


DECOY_SIGMA = 1.0
DECOY_WEIGHT = 0.05
CLASS_EPS = 1e-6


def oracle_predictions(targets: SceneTargets, noise: NoiseSpec, C: int, K, seed: int) -> np.ndarray:
    """Raw head outputs (P, D) that a well-trained network might emit.

    Object points put ``1 - eps`` on their class; component 0 of their class
    is the encoded ground truth plus noise, with a scale set by the noise
    policy; further components are low-weight, high-scale decoys displaced
    along the box heading.
    """
    from .mixture import _components

    Ks = _components(C, K)
    rng = np.random.default_rng(seed)
    P = len(targets.labels)
    raw = np.zeros((P, head_size(C, Ks)))
    other = math.log(CLASS_EPS / max(C - 1, 1))
    raw[:, :C] = other
    raw[np.arange(P), targets.labels] = math.log1p(-CLASS_EPS)

    # neutral, finite box for streams a point does not belong to
    neutral = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    off = C
    for ci, Kc in enumerate(Ks):
        c = ci + 1
        blk = np.tile(neutral, (P, Kc, 1))
        idx = np.flatnonzero(targets.labels == c)
        n = idx.size
        if n:
            gt = targets.params[idx]
            lw = targets.boxes[idx, 3:5]
            p0 = gt.copy()
            p0[:, 0:2] += rng.normal(0.0, noise.center, (n, 2)) if noise.center > 0 else 0.0
            if noise.orientation > 0:
                rot = rng.normal(0.0, noise.orientation, n)
                ang = np.arctan2(p0[:, 3], p0[:, 2]) + rot
                p0[:, 2], p0[:, 3] = np.cos(ang), np.sin(ang)
            if noise.dimension > 0:
                p0[:, 4:6] = np.maximum(p0[:, 4:6] + rng.normal(0.0, noise.dimension, (n, 2)), 0.1)
            sigma = noise.truthful_sigma(lw[:, 0], lw[:, 1]) * noise.sigma_factor
            blk[idx, 0, :6] = p0
            blk[idx, 0, 6] = np.log(sigma)
            blk[idx, 0, 7] = math.log(1.0 - DECOY_WEIGHT * (Kc - 1))
            rel = np.arctan2(gt[:, 3], gt[:, 2])
            for k in range(1, Kc):
                shift = (1.0 + k) * lw[:, 0] * (1 if k % 2 else -1)
                # displacement along the box heading, expressed in the point frame
                dk = gt.copy()
                dk[:, 0] += shift * np.cos(rel)
                dk[:, 1] += shift * np.sin(rel)
                blk[idx, k, :6] = dk
                blk[idx, k, 6] = math.log(DECOY_SIGMA)
                blk[idx, k, 7] = math.log(DECOY_WEIGHT)
        raw[:, off: off + Kc * PARAMS_PER_COMPONENT] = blk.reshape(P, -1)
        off += Kc * PARAMS_PER_COMPONENT
    return raw


# -- scene generators ---------------------------------------------------------


def _separated(box: OrientedBox, placed, margin: float) -> bool:
    r = 0.5 * math.hypot(box.length, box.width)
    for o in placed:
        ro = 0.5 * math.hypot(o.box.length, o.box.width)
        if math.hypot(box.cx - o.box.cx, box.cy - o.box.cy) < r + ro + margin:
            return False
    return True


def random_scene(seed: int, cfg: SensorConfig | None = None, n_objects=(1, 8), classes=DEFAULT_CLASSES,
                 class_ids=None, min_range: float = 5.0, margin: float = 0.5, prune: bool = True) -> Scene:
    """Random non-overlapping objects inside the sensor wedge.

    With ``prune`` objects that would receive no returns are dropped; the
    nearest object is never fully occluded, so at least one survives.
    """
    cfg = cfg or SensorConfig.reference()
    rng = np.random.default_rng(seed)
    lo, hi = n_objects
    target = int(rng.integers(lo, hi + 1))
    class_ids = list(class_ids) if class_ids is not None else list(range(1, len(classes) + 1))
    placed: list = []
    attempts = 0
    max_r = cfg.max_range * 0.92
    while len(placed) < target and attempts < 1000:
        attempts += 1
        cid = int(rng.choice(class_ids))
        info = classes[cid - 1]
        rng_r = rng.uniform(min_range, max_r)
        az = rng.uniform(cfg.fov_min + 0.05, cfg.fov_max - 0.05)
        box = OrientedBox(
            rng_r * math.cos(az), rng_r * math.sin(az), rng.uniform(-math.pi, math.pi),
            rng.uniform(*info.length_range), rng.uniform(*info.width_range),
        )
        if _separated(box, placed, margin):
            placed.append(GroundTruthObject(cid, box, info.height))
    scene = Scene(tuple(placed), seed, {"kind": "random", "n_objects": list(n_objects)})
    return prune_invisible(scene, cfg) if prune else scene


def prune_invisible(scene: Scene, cfg: SensorConfig, min_columns: int = 1) -> Scene:
    dist, obj = ray_hits(scene, cfg.column_centers())
    # a column counts if the laser closest to horizontal stays within range
    in_range = dist / np.cos(np.min(np.abs(cfg.elevation_array))) <= cfg.max_range
    counts = np.bincount(obj[(obj >= 0) & in_range], minlength=len(scene.objects))
    keep = tuple(o for o, c in zip(scene.objects, counts) if c >= min_columns)
    return Scene(keep, scene.seed, scene.generator)


def side_by_side_scene(distance: float = 15.0, gap: float = 0.3, length: float = 4.5, width: float = 1.9) -> Scene:
    """Two same-size vehicles parked side by side, facing along the sensor axis."""
    off = 0.5 * (width + gap)
    objs = tuple(
        GroundTruthObject(1, OrientedBox(distance, s * off, 0.0, length, width), DEFAULT_CLASSES[0].height)
        for s in (1.0, -1.0)
    )
    return Scene(objs, None, {"kind": "side_by_side", "distance": distance, "gap": gap})


def sparse_far_scene(distance: float = 62.0, yaw: float = 0.6) -> Scene:
    """A single far vehicle that receives only a handful of columns."""
    box = OrientedBox(distance, 3.0, yaw, 4.6, 1.9)
    return Scene((GroundTruthObject(1, box, DEFAULT_CLASSES[0].height),), None,
                 {"kind": "sparse_far", "distance": distance})


def corridor_scene(count: int = 4, spacing: float = 9.0, start: float = 8.0) -> Scene:
    """Vehicles queued straight ahead; all but the first are occluded."""
    objs = tuple(
        GroundTruthObject(1, OrientedBox(start + i * spacing, 0.0, 0.0, 4.5, 1.9), DEFAULT_CLASSES[0].height)
        for i in range(count)
    )
    return Scene(objs, None, {"kind": "corridor", "count": count})


def wall_scene(cfg: SensorConfig, distance: float = 20.0, length: float = 4.6, width: float = 1.9,
               gap: float = 0.0) -> Scene:
    """Vehicles packed edge to edge on an arc so every ray in the FOV hits one.

    Used for the fully occupied benchmark frame.
    """
    span = cfg.fov_max - cfg.fov_min
    step = (length + gap) / distance
    n = int(math.ceil((span + 0.2) / step)) + 1
    objs = []
    for i in range(n):
        az = cfg.fov_min - 0.1 + i * step
        objs.append(GroundTruthObject(
            1, OrientedBox(distance * math.cos(az), distance * math.sin(az), az + math.pi / 2, length, width),
            DEFAULT_CLASSES[0].height,
        ))
    return Scene(tuple(objs), None, {"kind": "wall", "distance": distance})


GENERATORS = {
    "random": random_scene,
    "side_by_side": side_by_side_scene,
    "sparse_far": sparse_far_scene,
    "corridor": corridor_scene,
}
