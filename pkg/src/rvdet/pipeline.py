"""Post-network detection: decode heads, cluster and fuse, then NMS."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .boxgeom import box_axes, corners_from_axes, decode_boxes
from .errors import InvalidInputError
from .lidarsim import DEFAULT_CLASSES, ClassSpec, NoiseSpec
from .meanshift import cluster
from .mixture import decode_class, fuse_segments, likelihood_score, softmax
from .nms import Detection, NmsConfig, NmsMode, run_nms
from .rangeview import ImagePoints, SensorConfig


@dataclass(frozen=True)
class PipelineConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig.reference)
    classes: tuple = DEFAULT_CLASSES
    bin_size: float = 0.5
    iterations: int = 3
    class_threshold: float | None = None  # None -> 1 / C
    nms_mode: str = "hard"
    nms_fixed_threshold: float | None = None
    fusion: bool = True
    backend: str = "dense"
    mix_weight: float = 0.25
    gamma: float = 2.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int | None = None

    def __post_init__(self):
        if self.bin_size <= 0 or self.iterations < 0:
            raise InvalidInputError("bin_size must be > 0 and iterations >= 0")
        if self.backend not in ("dense", "sparse"):
            raise InvalidInputError(f"unknown mean-shift backend {self.backend!r}")
        NmsMode(self.nms_mode)

    @property
    def C(self) -> int:
        return len(self.classes) + 1

    @property
    def K(self) -> list:
        return [c.components for c in self.classes]

    @property
    def class_names(self) -> list:
        return ["background"] + [c.name for c in self.classes]

    @property
    def threshold(self) -> float:
        return 1.0 / self.C if self.class_threshold is None else self.class_threshold

    def nms_config(self) -> NmsConfig:
        return NmsConfig(
            mode=NmsMode(self.nms_mode),
            widths={i + 1: c.mean_width for i, c in enumerate(self.classes)},
            fixed_threshold=self.nms_fixed_threshold,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["sensor"] = self.sensor.to_dict()
        d["classes"] = [
            {"name": c.name, "components": c.components, "mean_width": c.mean_width, "height": c.height,
             "length_range": list(c.length_range), "width_range": list(c.width_range),
             "iou_threshold": c.iou_threshold}
            for c in self.classes
        ]
        d["noise"] = {f.name: getattr(self.noise, f.name) for f in fields(self.noise)}
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "sensor" in kw:
            s = kw["sensor"]
            kw["sensor"] = SensorConfig.load(s) if isinstance(s, str) else SensorConfig.from_dict(s)
        if "classes" in kw:
            kw["classes"] = tuple(
                ClassSpec(c["name"], int(c["components"]), float(c["mean_width"]), float(c.get("height", 1.5)),
                          tuple(c.get("length_range", (4.0, 4.0))), tuple(c.get("width_range", (2.0, 2.0))),
                          float(c.get("iou_threshold", 0.7)))
                for c in kw["classes"]
            )
        if "noise" in kw:
            kw["noise"] = NoiseSpec(**kw["noise"])
        return replace(base or cls(), **kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise InvalidInputError(f"{path}: bad config ({exc})") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class Stream:
    """One (class, component) stream after clustering.

    ``point_index`` indexes the image points that passed the class threshold.
    Boxes are kept as center/half-axis rows (see ``box_axes``); per-point
    corners are derived on access. ``corners``/``sigma`` are each point's box
    after replacement by its cluster (identical to the raw ones with fusion off).
    """

    class_id: int
    component: int
    point_index: np.ndarray
    raw_axes: np.ndarray
    raw_sigma: np.ndarray
    cluster_axes: np.ndarray
    cluster_sigma: np.ndarray
    labels: np.ndarray

    @property
    def raw_corners(self) -> np.ndarray:
        return corners_from_axes(self.raw_axes)

    @property
    def corners(self) -> np.ndarray:
        return corners_from_axes(self.cluster_axes)[self.labels]

    @property
    def sigma(self) -> np.ndarray:
        return self.cluster_sigma[self.labels]


@dataclass
class DetectResult:
    detections: list
    streams: dict
    timings: dict
    pre_nms: list = field(default_factory=list)


@dataclass
class StreamResult:
    streams: dict
    detections: list
    timings: dict


def cluster_streams(points: ImagePoints, raw: np.ndarray, cfg: PipelineConfig) -> StreamResult:
    """Decode, then cluster and fuse every (class, component) stream; no suppression."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != len(points):
        raise InvalidInputError(f"expected {len(points)} prediction rows, got {raw.shape[0]}")
    t0 = time.perf_counter()
    probs = softmax(raw[:, : cfg.C])
    thr = cfg.threshold
    selected = {c: np.flatnonzero(probs[:, c] > thr) for c in range(1, cfg.C)}
    mixtures = {c: decode_class(raw, cfg.C, cfg.K, c, idx) for c, idx in selected.items() if idx.size}
    t1 = time.perf_counter()

    streams = {}
    dets = []
    for c, mix in mixtures.items():
        idx = selected[c]
        xy, th = points.xy[idx], points.theta[idx]
        sigma_all = mix.sigma
        for k in range(mix.K):
            centers, yaw, length, width = decode_boxes(xy, th, mix.params[:, k])
            axes = box_axes(centers, yaw, length, width)
            sig = sigma_all[:, k]
            alpha = mix.alpha[:, k]
            if cfg.fusion:
                a = cluster(centers, iterations=cfg.iterations, dx=cfg.bin_size, dy=cfg.bin_size,
                            backend=cfg.backend)
                labels, n = a.labels, a.num_clusters
                # corners are linear in the axes, so fusing axes fuses corners
                fused_axes, fs, counts = fuse_segments(axes, sig, labels, n)
                fa = np.bincount(labels, weights=alpha, minlength=n) / counts
            else:
                labels = np.arange(idx.size)
                fused_axes, fs, fa = axes, sig, alpha
            streams[(c, k)] = Stream(c, k, idx, axes, sig, fused_axes, fs, labels)
            fc = corners_from_axes(fused_axes)
            score = likelihood_score(fa, fs)
            dets.extend(
                Detection(c, fc[j], float(fs[j]), float(fa[j]), float(score[j])) for j in range(len(fs))
            )
    t2 = time.perf_counter()
    return StreamResult(streams, dets, {"decode": t1 - t0, "cluster": t2 - t1})


def detect(points: ImagePoints, raw: np.ndarray, cfg: PipelineConfig) -> DetectResult:
    """Run decode -> mean shift + fusion -> NMS on one frame's head outputs."""
    t0 = time.perf_counter()
    pre = cluster_streams(points, raw, cfg)
    t1 = time.perf_counter()
    kept = run_nms(pre.detections, cfg.nms_config())
    t2 = time.perf_counter()
    timings = {**pre.timings, "nms": t2 - t1, "total": t2 - t0}
    return DetectResult(kept, pre.streams, timings, pre.detections)
