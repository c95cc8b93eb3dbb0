"""Sweep -> dense five-channel range image, and cell -> 3D point back-projection."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxgeom import wrap_angle
from .errors import FormatError, InvalidInputError

CH_RANGE, CH_HEIGHT, CH_AZIMUTH, CH_INTENSITY, CH_OCCUPIED = range(5)

SWEEP_MAGIC = b"RVSW"
SWEEP_VERSION = 1
_SWEEP_HEADER = struct.Struct("<4sHI")
SWEEP_DTYPE = np.dtype([("r", "<f4"), ("e", "<f4"), ("theta", "<f4"), ("m", "<u2")])


def hdl64_elevations() -> np.ndarray:
    """Reference 64-laser elevation table in radians, highest first.

    Two blocks of 32 lasers with different spacing, so the table is
    non-uniform with a mean step of roughly 0.42 degrees.
    """
    upper = np.linspace(2.0, -8.33, 32)
    lower = np.linspace(-8.83, -24.33, 32)
    return np.deg2rad(np.concatenate([upper, lower]))


@dataclass(frozen=True)
class SensorConfig:
    elevations: tuple
    fov_min: float = -math.pi / 4
    fov_max: float = math.pi / 4
    width: int = 512
    max_range: float = 70.0
    azimuth_resolution: float = field(default=0.0)

    def __post_init__(self):
        el = np.asarray(self.elevations, dtype=float)
        if el.ndim != 1 or el.size == 0:
            raise InvalidInputError("elevation table must be a non-empty 1-D sequence")
        d = np.diff(el)
        if el.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise InvalidInputError("elevation table must be strictly monotonic")
        if not self.fov_max > self.fov_min:
            raise InvalidInputError("fov_max must exceed fov_min")
        if self.width <= 0 or self.max_range <= 0:
            raise InvalidInputError("width and max_range must be positive")
        object.__setattr__(self, "elevations", tuple(float(v) for v in el))
        if self.azimuth_resolution <= 0:
            object.__setattr__(self, "azimuth_resolution", (self.fov_max - self.fov_min) / self.width)

    @property
    def laser_count(self) -> int:
        return len(self.elevations)

    @property
    def height(self) -> int:
        return self.laser_count

    @property
    def elevation_array(self) -> np.ndarray:
        return np.asarray(self.elevations)

    @property
    def row_of_laser(self) -> np.ndarray:
        """Row index per laser id; row 0 is the highest elevation."""
        order = np.argsort(-self.elevation_array, kind="stable")
        rows = np.empty(self.laser_count, dtype=np.int64)
        rows[order] = np.arange(self.laser_count)
        return rows

    def column_centers(self) -> np.ndarray:
        return self.fov_min + (np.arange(self.width) + 0.5) * self.azimuth_resolution

    @classmethod
    def reference(cls) -> "SensorConfig":
        return cls(tuple(hdl64_elevations()))

    @classmethod
    def uniform(cls, laser_count=64, top_deg=2.0, bottom_deg=-24.33, **kw) -> "SensorConfig":
        """Uniformly spaced elevation table (the baseline image spacing)."""
        return cls(tuple(np.deg2rad(np.linspace(top_deg, bottom_deg, laser_count))), **kw)

    def to_dict(self) -> dict:
        return asdict(self) | {"elevations": list(self.elevations)}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        d = dict(d)
        if "elevations_deg" in d:
            d["elevations"] = tuple(np.deg2rad(d.pop("elevations_deg")))
        known = {"elevations", "fov_min", "fov_max", "width", "max_range", "azimuth_resolution"}
        extra = set(d) - known
        if extra:
            raise InvalidInputError(f"unknown sensor config keys: {sorted(extra)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SensorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Sweep:
    """Struct-of-arrays LiDAR sweep: one entry per return."""

    r: np.ndarray
    e: np.ndarray
    theta: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        n = len(self.r)
        if not (len(self.e) == len(self.theta) == len(self.m) == n):
            raise InvalidInputError("sweep columns differ in length")

    def __len__(self):
        return len(self.r)

    @classmethod
    def empty(cls) -> "Sweep":
        z = np.zeros(0)
        return cls(z, z.copy(), z.copy(), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_arrays(cls, r, e, theta, m) -> "Sweep":
        return cls(
            np.asarray(r, dtype=float),
            np.asarray(e, dtype=float),
            np.asarray(theta, dtype=float),
            np.asarray(m, dtype=np.int64),
        )

    def take(self, idx) -> "Sweep":
        return Sweep(self.r[idx], self.e[idx], self.theta[idx], self.m[idx])

    def validate(self, cfg: SensorConfig):
        if len(self) and (self.m.min() < 0 or self.m.max() >= cfg.laser_count):
            raise InvalidInputError("laser id out of range")
        if np.any(~np.isfinite(self.r)) or np.any(~np.isfinite(self.theta)):
            raise InvalidInputError("non-finite range or azimuth")


def to_cartesian(r, theta, m, cfg: SensorConfig) -> np.ndarray:
    """Spherical -> sensor-frame Cartesian. Works on scalars or arrays.

    Returns shape (3,) for scalar input, (n, 3) otherwise.
    """
    m_arr = np.asarray(m)
    if m_arr.size and (m_arr.min() < 0 or m_arr.max() >= cfg.laser_count):
        raise InvalidInputError(f"laser id out of range [0, {cfg.laser_count})")
    el = cfg.elevation_array[m_arr]
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    horiz = r * np.cos(el)
    return np.stack([horiz * np.cos(theta), horiz * np.sin(theta), r * np.sin(el)], axis=-1)


@dataclass(frozen=True)
class RangeImage:
    """Five-channel (range, height, azimuth, intensity, occupied) image, shape (5, H, W)."""

    channels: np.ndarray
    source_index: np.ndarray
    dropped: int = 0

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def occupied(self) -> np.ndarray:
        return self.channels[CH_OCCUPIED] > 0

    @property
    def num_points(self) -> int:
        return int(self.occupied.sum())


def empty_image(cfg: SensorConfig) -> RangeImage:
    ch = np.zeros((5, cfg.height, cfg.width))
    ch[CH_AZIMUTH] = cfg.column_centers()[None, :]
    return RangeImage(ch, np.full((cfg.height, cfg.width), -1, dtype=np.int64))


def build_range_image(sweep: Sweep, cfg: SensorConfig) -> RangeImage:
    """Scatter a sweep into the range image, keeping the closest return per cell.

    Returns outside the azimuth FOV or beyond ``max_range`` are dropped and
    counted in ``RangeImage.dropped``.
    """
    sweep.validate(cfg)
    img = empty_image(cfg)
    n = len(sweep)
    if n == 0:
        return img

    theta = np.atleast_1d(wrap_angle(sweep.theta))
    keep = (
        (sweep.r > 0)
        & (sweep.r <= cfg.max_range)
        & (theta >= cfg.fov_min)
        & (theta <= cfg.fov_max)
    )
    idx = np.flatnonzero(keep)
    dropped = n - idx.size

    rows = cfg.row_of_laser[sweep.m[idx]]
    cols = np.clip(
        np.floor((theta[idx] - cfg.fov_min) / cfg.azimuth_resolution).astype(np.int64), 0, cfg.width - 1
    )
    cell = rows * cfg.width + cols
    r, e = sweep.r[idx], sweep.e[idx]
    # canonical order: cell, then range, then azimuth/intensity as value tie-breaks,
    # so the winner never depends on input order
    order = np.lexsort((idx, e, theta[idx], r, cell))
    cell_sorted = cell[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    win = order[first]

    rr, cc = rows[win], cols[win]
    src = idx[win]
    z = to_cartesian(sweep.r[src], theta[src], sweep.m[src], cfg)[:, 2]
    ch = img.channels
    ch[CH_RANGE, rr, cc] = r[win]
    ch[CH_HEIGHT, rr, cc] = z
    ch[CH_AZIMUTH, rr, cc] = theta[src]
    ch[CH_INTENSITY, rr, cc] = e[win]
    ch[CH_OCCUPIED, rr, cc] = 1.0
    img.source_index[rr, cc] = src
    return RangeImage(ch, img.source_index, dropped)


@dataclass(frozen=True)
class ImagePoints:
    """Occupied cells in row-major order with their 3D positions."""

    rows: np.ndarray
    cols: np.ndarray
    xyz: np.ndarray
    theta: np.ndarray

    def __len__(self):
        return len(self.rows)

    @property
    def xy(self) -> np.ndarray:
        return self.xyz[:, :2]


def image_points(img: RangeImage, cfg: SensorConfig) -> ImagePoints:
    rows, cols = np.nonzero(img.occupied)
    if rows.size == 0:
        return ImagePoints(rows, cols, np.zeros((0, 3)), np.zeros(0))
    laser_of_row = np.argsort(cfg.row_of_laser)
    theta = img.channels[CH_AZIMUTH, rows, cols]
    xyz = to_cartesian(img.channels[CH_RANGE, rows, cols], theta, laser_of_row[rows], cfg)
    return ImagePoints(rows, cols, xyz, theta)


# -- file formats ------------------------------------------------------------


def write_sweep(path, sweep: Sweep):
    rec = np.empty(len(sweep), dtype=SWEEP_DTYPE)
    rec["r"], rec["e"], rec["theta"], rec["m"] = sweep.r, sweep.e, sweep.theta, sweep.m
    with open(path, "wb") as f:
        f.write(_SWEEP_HEADER.pack(SWEEP_MAGIC, SWEEP_VERSION, len(sweep)))
        f.write(rec.tobytes())


def read_sweep(path) -> Sweep:
    data = Path(path).read_bytes()
    if len(data) < _SWEEP_HEADER.size:
        raise FormatError(f"{path}: truncated sweep header")
    magic, version, count = _SWEEP_HEADER.unpack_from(data)
    if magic != SWEEP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SWEEP_VERSION:
        raise FormatError(f"{path}: unsupported sweep version {version}")
    body = data[_SWEEP_HEADER.size:]
    if len(body) != count * SWEEP_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {count} records, body has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=SWEEP_DTYPE)
    return Sweep.from_arrays(rec["r"], rec["e"], rec["theta"], rec["m"])


def read_xyzi_bin(path, cfg: SensorConfig) -> Sweep:
    """Read a float32 (x, y, z, intensity) point cloud and assign lasers by nearest elevation."""
    pts = np.fromfile(path, dtype="<f4")
    if pts.size % 4:
        raise FormatError(f"{path}: size is not a multiple of 4 float32 values")
    return sweep_from_xyz(pts.reshape(-1, 4).astype(float), cfg)


def sweep_from_xyz(pts: np.ndarray, cfg: SensorConfig) -> Sweep:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inten = pts[:, 3] if pts.shape[1] > 3 else np.zeros(len(pts))
    r = np.sqrt(x * x + y * y + z * z)
    el = np.arctan2(z, np.hypot(x, y))
    m = np.argmin(np.abs(el[:, None] - cfg.elevation_array[None, :]), axis=1)
    ok = r > 0
    return Sweep.from_arrays(r[ok], inten[ok], np.arctan2(y, x)[ok], m[ok])
