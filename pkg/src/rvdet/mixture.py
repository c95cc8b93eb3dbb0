"""Per-point head decoding and product-of-distributions fusion.

Raw head layout for one point, with ``C`` classes (index 0 is background)
and ``K[c]`` mixture components for every foreground class ``c``::

    [C class logits,
     for c in 1..C-1, for k in 0..K[c]-1:
         dx, dy, wx, wy, l, w, log_scale, weight_logit]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidInputError

PARAMS_PER_COMPONENT = 8
BOX_SLICE = slice(0, 6)
LOGSCALE = 6
WEIGHT_LOGIT = 7


def _components(C: int, K) -> list[int]:
    if isinstance(K, (int, np.integer)):
        return [int(K)] * (C - 1)
    K = [int(k) for k in K]
    if len(K) != C - 1:
        raise InvalidInputError(f"need one component count per foreground class, got {len(K)} for C={C}")
    return K


def head_size(C: int, K) -> int:
    return C + PARAMS_PER_COMPONENT * sum(_components(C, K))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.moveaxis(np.asarray(z, dtype=float), axis, -1)
    if z.ndim and z.shape[-1] <= 8:
        # unrolled over short axes: numpy reductions along a tiny trailing axis are slow
        top = z[..., 0]
        for i in range(1, z.shape[-1]):
            top = np.maximum(top, z[..., i])
        ez = np.exp(z - top[..., None])
        total = ez[..., 0].copy()
        for i in range(1, z.shape[-1]):
            total += ez[..., i]
        ez /= total[..., None]
    else:
        ez = np.exp(z - np.max(z, axis=-1, keepdims=True))
        ez /= ez.sum(axis=-1, keepdims=True)
    return np.moveaxis(ez, -1, axis)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class ClassMixture:
    """K-component box mixture for one foreground class, batched over points.

    ``params`` is (n, K, 6) with the orientation renormalized to unit length,
    ``sigma`` and ``alpha`` are (n, K).
    """

    params: np.ndarray
    log_scale: np.ndarray
    alpha: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def K(self) -> int:
        return self.params.shape[1]


@dataclass(frozen=True)
class Predictions:
    """Decoded predictions for ``n`` points.

    ``mixtures[c - 1]`` holds foreground class ``c``.
    """

    class_probs: np.ndarray
    mixtures: list

    def __len__(self):
        return self.class_probs.shape[0]

    @property
    def C(self) -> int:
        return self.class_probs.shape[1]

    @property
    def K(self) -> list:
        return [m.K for m in self.mixtures]


def split_raw(raw: np.ndarray, C: int, K):
    """Views into a (n, D) raw array: class logits and per-class (n, K, 8) blocks."""
    Ks = _components(C, K)
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw[None, :]
    if raw.shape[-1] != head_size(C, Ks):
        raise InvalidInputError(f"raw head length {raw.shape[-1]} != expected {head_size(C, Ks)}")
    blocks = []
    off = C
    for k in Ks:
        blocks.append(raw[:, off: off + k * PARAMS_PER_COMPONENT].reshape(-1, k, PARAMS_PER_COMPONENT))
        off += k * PARAMS_PER_COMPONENT
    return raw[:, :C], blocks


def decode_heads(raw: np.ndarray, C: int, K) -> Predictions:
    """Decode a batch of raw head vectors, shape (n, D)."""
    logits, blocks = split_raw(raw, C, K)
    raw2 = np.asarray(raw, dtype=float).reshape(len(logits), -1)
    mixtures = [decode_class(raw2, C, K, c) for c in range(1, C)]
    return Predictions(softmax(logits), mixtures)


def decode_class(raw: np.ndarray, C: int, K, class_id: int, rows=None) -> ClassMixture:
    """Decode only foreground class ``class_id``'s mixture, optionally for a subset of rows."""
    Ks = _components(C, K)
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != head_size(C, Ks):
        raise InvalidInputError(f"raw must be (n, {head_size(C, Ks)})")
    if not 1 <= class_id < C:
        raise InvalidInputError(f"class {class_id} is not a foreground class")
    off = C + PARAMS_PER_COMPONENT * sum(Ks[: class_id - 1])
    Kc = Ks[class_id - 1]
    blk = raw[:, off: off + Kc * PARAMS_PER_COMPONENT]
    if rows is not None:
        blk = blk[rows]
    blk = blk.reshape(-1, Kc, PARAMS_PER_COMPONENT)
    params = blk[..., BOX_SLICE].copy()
    norm = np.hypot(params[..., 2], params[..., 3])
    zero = norm == 0
    # a zero orientation vector decodes as heading along the point's azimuth
    np.divide(params[..., 2], norm, out=params[..., 2], where=~zero)
    np.divide(params[..., 3], norm, out=params[..., 3], where=~zero)
    if zero.any():
        params[..., 2][zero] = 1.0
        params[..., 3][zero] = 0.0
    return ClassMixture(params, blk[..., LOGSCALE].copy(), softmax(blk[..., WEIGHT_LOGIT]))


def decode_head(raw: Sequence[float], C: int, K) -> Predictions:
    """Decode a single point's raw head vector (a batch of one)."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1:
        raise InvalidInputError("decode_head expects a 1-D raw vector")
    return decode_heads(raw[None, :], C, K)


def encode_heads(class_probs, mixtures, eps: float = 1e-300) -> np.ndarray:
    """Inverse of :func:`decode_heads` up to softmax shift (logits = log p)."""
    class_probs = np.asarray(class_probs, dtype=float)
    n = class_probs.shape[0]
    parts = [np.log(np.maximum(class_probs, eps))]
    for m in mixtures:
        blk = np.empty((n, m.K, PARAMS_PER_COMPONENT))
        blk[..., BOX_SLICE] = m.params
        blk[..., LOGSCALE] = m.log_scale
        blk[..., WEIGHT_LOGIT] = np.log(np.maximum(m.alpha, eps))
        parts.append(blk.reshape(n, -1))
    return np.concatenate(parts, axis=1)


# -- fusion ------------------------------------------------------------------


@dataclass(frozen=True)
class FusedBox:
    corners: np.ndarray
    sigma: float
    member_count: int


def fuse(members) -> FusedBox:
    """Precision-weighted fusion of ``(corner_vector, sigma)`` members.

    Mean is weighted by ``1/sigma^2``; fused variance is the inverse of the
    summed precisions. Sums are exactly rounded so the result does not
    depend on member order.
    """
    members = list(members)
    if not members:
        raise InvalidInputError("fuse needs at least one member")
    b = np.array([np.asarray(m[0], dtype=float) for m in members])
    sig = np.array([float(m[1]) for m in members])
    if np.any(~(sig > 0)):
        raise InvalidInputError("member sigmas must be positive")
    w_hi, w_lo = _inverse_square(sig)
    W = _dd_sum(np.concatenate([w_hi, w_lo]))
    mean = np.empty(b.shape[1])
    for n in range(b.shape[1]):
        p, e = _two_product(w_hi, b[:, n])
        mean[n] = _dd_divide(_dd_sum(np.concatenate([p, e, w_lo * b[:, n]])), W)
    return FusedBox(mean, _dd_inverse_sqrt(W), len(members))


def _dd_sum(terms):
    hi = math.fsum(terms)
    return hi, math.fsum(np.append(terms, -hi))


def _dd_divide(num, den) -> float:
    q = num[0] / den[0]
    p, e = _two_product(np.float64(q), np.float64(den[0]))
    r = math.fsum([num[0], num[1], -p, -e, -q * den[1]])
    return q + r / den[0]


def _dd_inverse_sqrt(x) -> float:
    y = 1.0 / math.sqrt(x[0])
    # one Newton step on 1 - x y^2 with the residual evaluated in double-double
    y2, y2e = _two_product(np.float64(y), np.float64(y))
    p, e = _two_product(np.float64(x[0]), y2)
    r = math.fsum([1.0, -p, -e, -x[0] * y2e, -x[1] * y2])
    return y + 0.5 * y * r


_SPLITTER = 134217729.0  # 2**27 + 1


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def _two_product(a, b):
    """``a * b`` as an unevaluated sum ``p + e`` that is exact (no overflow assumed)."""
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _inverse_square(s):
    """``1 / s**2`` as a double-double ``hi + lo``; keeps weight rounding out of cancelling sums."""
    sq, sq_err = _two_product(s, s)
    hi = 1.0 / sq
    p, pe = _two_product(hi, sq)
    residual = ((1.0 - p) - pe) - hi * sq_err
    return hi, residual * hi


def fuse_segments(corners: np.ndarray, sigma: np.ndarray, labels: np.ndarray, n_clusters: int):
    """Vectorized fusion of many clusters at once.

    ``labels[i]`` is the cluster of member ``i``. ``corners`` may be any
    (n, D) representation that is linear in the box (corner vectors or
    center/half-axis rows). Returns (fused rows (n_clusters, D), fused sigma
    (n_clusters,), counts).
    """
    w = 1.0 / (sigma * sigma)
    wsum = np.bincount(labels, weights=w, minlength=n_clusters)
    weighted = np.ascontiguousarray((corners * w[:, None]).T)
    num = np.empty((n_clusters, corners.shape[1]))
    for n in range(corners.shape[1]):
        num[:, n] = np.bincount(labels, weights=weighted[n], minlength=n_clusters)
    counts = np.bincount(labels, minlength=n_clusters)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / wsum[:, None], np.sqrt(1.0 / wsum), counts


def likelihood_score(alpha, sigma):
    """Mixture-weighted Laplace density height at the mean, ``alpha / (2 sigma)``."""
    return alpha / (2.0 * sigma)


def laplace_cdf(x, mu, scale):
    """Laplace CDF, vectorized."""
    z = (np.asarray(x, dtype=float) - mu) / scale
    out = np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))
    if np.ndim(out) == 0:
        return float(out)
    return out


# -- prediction file ---------------------------------------------------------

PRED_MAGIC = b"RVPR"
PRED_VERSION = 1


def write_predictions(path, rows, cols, raw, C: int, K):
    """One record per occupied cell: (uint16 row, uint16 col, float32 raw[D])."""
    Ks = _components(C, K)
    raw = np.asarray(raw, dtype=float)
    D = head_size(C, Ks)
    if raw.shape != (len(rows), D):
        raise InvalidInputError(f"raw must be ({len(rows)}, {D})")
    rec = np.zeros(len(rows), dtype=_pred_dtype(D))
    rec["row"], rec["col"], rec["raw"] = rows, cols, raw
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHH", PRED_MAGIC, PRED_VERSION, C, len(Ks)))
        f.write(struct.pack(f"<{len(Ks)}H", *Ks))
        f.write(struct.pack("<I", len(rows)))
        f.write(rec.tobytes())


def read_predictions(path):
    """Returns ``(rows, cols, raw (n, D) float64, C, K list)``."""
    data = Path(path).read_bytes()
    try:
        magic, version, C, nk = struct.unpack_from("<4sHHH", data)
        if magic != PRED_MAGIC or version != PRED_VERSION:
            raise FormatError(f"{path}: not a version-{PRED_VERSION} prediction file")
        off = 10
        Ks = list(struct.unpack_from(f"<{nk}H", data, off))
        off += 2 * nk
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        D = head_size(C, Ks)
    except (struct.error, InvalidInputError) as exc:
        raise FormatError(f"{path}: malformed prediction header") from exc
    dt = _pred_dtype(D)
    if len(data) - off != count * dt.itemsize:
        raise FormatError(f"{path}: expected {count} prediction records")
    rec = np.frombuffer(data, dtype=dt, offset=off)
    return rec["row"].astype(np.int64), rec["col"].astype(np.int64), rec["raw"].astype(float), C, Ks


def _pred_dtype(D: int) -> np.dtype:
    return np.dtype([("row", "<u2"), ("col", "<u2"), ("raw", "<f4", (D,))])
