"""The estimator class: a zero-padded CNN with one global max-pool, a
scalar-input ReLU network on top, and output truncation to ``[-beta, beta]``.

Conventions
-----------
Channel maps are stored as ``(B, d1, d2, channels)``.  A layer with filter
size ``M`` computes, at every location ``(i, j)`` of the grid,

    o[i, j, s2] = relu(sum_{s1, t1, t2} w[t1, t2, s1, s2] * o_prev[i + t1, j + t2, s1] + bias[s2])

where taps falling off the bottom/right edge are dropped (equivalently the
previous map is zero-extended by ``M - 1``), so every layer keeps the input
size.  The CNN output is the maximum of ``o_L @ w_out`` over positions
``i < d1 - M_L + 1, j < d2 - M_L + 1``.  The channel sum runs over the
previous layer's channels.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .hmp_model import as_pixels

WEIGHTS_MAGIC = b"HMPW"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    """Weights or inputs do not match the architecture."""


@dataclass(frozen=True)
class CnnArchitecture:
    channels: tuple
    filter_sizes: tuple
    d1: int
    d2: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "filter_sizes", tuple(int(m) for m in self.filter_sizes))
        if not self.channels or len(self.channels) != len(self.filter_sizes):
            raise ShapeError("channel and filter-size lists must be non-empty and of equal length")
        if min(self.channels) < 1 or min(self.filter_sizes) < 1:
            raise ShapeError("channels and filter sizes must be positive")
        if max(self.filter_sizes) > min(self.d1, self.d2):
            raise ShapeError("filter size exceeds the image size")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "filter_sizes": list(self.filter_sizes),
                "d1": self.d1, "d2": self.d2}


@dataclass(frozen=True)
class FnnArchitecture:
    widths: tuple
    in_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ShapeError("a head needs at least one hidden layer of positive width")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "in_dim": self.in_dim}


@dataclass
class CnnWeights:
    filters: list   # layer r: (M_r, M_r, k_{r-1}, k_r)
    biases: list    # layer r: (k_r,)
    w_out: np.ndarray

    def check(self, arch: CnnArchitecture) -> None:
        if len(self.filters) != arch.depth or len(self.biases) != arch.depth:
            raise ShapeError("weight list length differs from the layer count")
        prev = 1
        for r, (m, k) in enumerate(zip(arch.filter_sizes, arch.channels)):
            if self.filters[r].shape != (m, m, prev, k):
                raise ShapeError(f"layer {r + 1} filter has shape {self.filters[r].shape}, expected {(m, m, prev, k)}")
            if self.biases[r].shape != (k,):
                raise ShapeError(f"layer {r + 1} bias has shape {self.biases[r].shape}")
            prev = k
        if self.w_out.shape != (prev,):
            raise ShapeError("output weights do not match the last layer's channels")

    @classmethod
    def zeros(cls, arch: CnnArchitecture) -> "CnnWeights":
        prev, filters = 1, []
        for m, k in zip(arch.filter_sizes, arch.channels):
            filters.append(np.zeros((m, m, prev, k)))
            prev = k
        return cls(filters, [np.zeros(k) for k in arch.channels], np.zeros(prev))


@dataclass
class FnnWeights:
    weights: list   # layer r: (k_r, k_{r-1})
    biases: list    # layer r: (k_r,)
    w_out: np.ndarray
    b_out: float = 0.0

    def check(self, arch: FnnArchitecture) -> None:
        if len(self.weights) != arch.depth or len(self.biases) != arch.depth:
            raise ShapeError("weight list length differs from the layer count")
        prev = arch.in_dim
        for r, k in enumerate(arch.widths):
            if self.weights[r].shape != (k, prev) or self.biases[r].shape != (k,):
                raise ShapeError(f"head layer {r + 1} has wrong shape")
            prev = k
        if self.w_out.shape != (prev,):
            raise ShapeError("head output weights do not match the last width")

    @classmethod
    def zeros(cls, arch: FnnArchitecture) -> "FnnWeights":
        prev, ws = arch.in_dim, []
        for k in arch.widths:
            ws.append(np.zeros((k, prev)))
            prev = k
        return cls(ws, [np.zeros(k) for k in arch.widths], np.zeros(prev), 0.0)


def relu(x):
    return np.maximum(x, 0.0)


def truncate(z, beta: float):
    """``T_beta z = max(-beta, min(beta, z))``."""
    return np.clip(z, -beta, beta)


def sgn(z):
    """+1 for z >= 0, -1 otherwise."""
    out = np.where(np.asarray(z) >= 0, 1, -1)
    return int(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# forward passes


def conv_layer(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pre-activation of one zero-padded convolution; ``x`` is ``(B, d1, d2, c_in)``."""
    m = w.shape[0]
    bsz, d1, d2, cin = x.shape
    xp = np.zeros((bsz, d1 + m - 1, d2 + m - 1, cin), dtype=x.dtype)
    xp[:, :d1, :d2] = x
    pre = np.broadcast_to(b.astype(x.dtype), (bsz, d1, d2, w.shape[3])).copy()
    for t1 in range(m):
        for t2 in range(m):
            pre += xp[:, t1:t1 + d1, t2:t2 + d2] @ w[t1, t2]
    return pre


def conv_layer_dropped_taps(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same as :func:`conv_layer`, summing only taps that land inside the grid."""
    m = w.shape[0]
    bsz, d1, d2, _ = x.shape
    pre = np.broadcast_to(b.astype(x.dtype), (bsz, d1, d2, w.shape[3])).copy()
    for t1 in range(m):
        for t2 in range(m):
            if t1 < d1 and t2 < d2:
                pre[:, :d1 - t1, :d2 - t2] += x[:, t1:, t2:] @ w[t1, t2]
    return pre


def _batch_images(images) -> tuple[np.ndarray, bool]:
    x = as_pixels(images)
    single = x.ndim == 2
    return x.reshape(-1, *x.shape[-2:]), single


def cnn_channels(weights: CnnWeights, images: np.ndarray) -> list[np.ndarray]:
    """All channel maps ``o^(0..L)`` for a batch ``(B, d1, d2)``."""
    o = [np.asarray(images)[..., None]]
    for w, b in zip(weights.filters, weights.biases):
        o.append(relu(conv_layer(o[-1], w, b)))
    return o


def output_region(arch: CnnArchitecture) -> tuple[int, int]:
    m = arch.filter_sizes[-1]
    return arch.d1 - m + 1, arch.d2 - m + 1


def cnn_forward(arch: CnnArchitecture, weights: CnnWeights, image) -> float | np.ndarray:
    """CNN output: global max over valid positions of the output-weighted last layer."""
    weights.check(arch)
    x, single = _batch_images(image)
    if x.shape[1:] != (arch.d1, arch.d2):
        raise ShapeError(f"image is {x.shape[1:]}, architecture expects {(arch.d1, arch.d2)}")
    n1, n2 = output_region(arch)
    last = cnn_channels(weights, x)[-1]
    v = (last[:, :n1, :n2] @ weights.w_out).reshape(len(x), -1).max(axis=1)
    return float(v[0]) if single else v


def fnn_forward(arch: FnnArchitecture, weights: FnnWeights, z) -> float | np.ndarray:
    """Scalar-input ReLU network ``g(z) = sum_i w_i g_i^(L)(z) + w_0``.

    ``z`` may be a scalar, a 1-d batch of scalars, or ``(B, in_dim)``.
    """
    weights.check(arch)
    z = np.asarray(z, dtype=float)
    single = z.ndim == (0 if arch.in_dim == 1 else 1)
    h = z.reshape(-1, arch.in_dim)
    for w, b in zip(weights.weights, weights.biases):
        h = relu(h @ w.T + b)
    out = h @ weights.w_out + weights.b_out
    if single:
        return float(out[0])
    return out.reshape(z.shape[:-1] if arch.in_dim > 1 else z.shape)


@dataclass(frozen=True)
class Predictor:
    """A member of the estimator class: truncated head-on-CNN."""

    cnn_arch: CnnArchitecture
    fnn_arch: FnnArchitecture
    cnn: CnnWeights
    fnn: FnnWeights
    beta: float

    def raw(self, images) -> np.ndarray:
        return fnn_forward(self.fnn_arch, self.fnn, cnn_forward(self.cnn_arch, self.cnn, images))

    def __call__(self, images, chunk: int = 4096):
        x, single = _batch_images(images)
        out = np.empty(len(x))
        for i in range(0, len(x), chunk):
            out[i:i + chunk] = truncate(self.raw(x[i:i + chunk]), self.beta)
        return float(out[0]) if single else out

    def classify(self, images):
        return sgn(self(images))


def predict(cnn_arch, fnn_arch, cnn_w, fnn_w, beta: float, image):
    """``T_beta(g(f(image)))``; classify with :func:`sgn`."""
    return Predictor(cnn_arch, fnn_arch, cnn_w, fnn_w, beta)(image)


# --------------------------------------------------------------------------
# architecture schedule


def pi_schedule(s: int, level: int, q: int) -> int:
    """Level index ``pi(s)`` of layer ``s``: the number of ``i in 1..l`` with
    ``s >= i + sum_{r=l-i+1}^{l-1} 4^r q``."""
    top = (4 ** level - 1) // 3 * q + level
    if not 1 <= s <= top:
        raise ValueError(f"layer index {s} outside 1..{top}")
    count = 0
    for i in range(1, level + 1):
        threshold = i + sum(4 ** r * q for r in range(level - i + 1, level))
        count += s >= threshold
    return count


@dataclass(frozen=True)
class Schedule:
    cnn: CnnArchitecture
    fnn: FnnArchitecture
    beta: float
    blocks_per_level: int
    scale: float
    n: int

    def to_dict(self) -> dict:
        return {"cnn": self.cnn.to_dict(), "fnn": self.fnn.to_dict(), "beta": self.beta,
                "blocks_per_level": self.blocks_per_level, "scale": self.scale, "n": self.n}


def schedule_from_theorem1(n: int, p: float, level: int, d1: int, d2: int, c1: float = 1.0,
                           c2: float = 1.0, c3: float = 1.0, c4: int = 4, c5: int = 7,
                           scale: float = 1.0) -> Schedule:
    """Depths, widths, filter sizes and truncation level for sample size ``n``.

    ``Q = ceil(scale * ceil(c3 * n^(2/(2p+4))))`` blocks per tree node,
    ``L1 = (4^l - 1)/3 * Q + l``, ``L2 = max(1, ceil(scale * ceil(c2 * n^(1/4))))``,
    ``M_s = 2^pi(s)``, constant widths ``c4`` and ``c5``, ``beta = c1 log n``.
    """
    if n < 2 or p < 1 or level < 1 or not 0 < scale <= 1:
        raise ValueError("need n >= 2, p >= 1, level >= 1 and 0 < scale <= 1")
    q = max(1, math.ceil(scale * math.ceil(c3 * n ** (2 / (2 * p + 4)))))
    l1 = (4 ** level - 1) // 3 * q + level
    l2 = max(1, math.ceil(scale * math.ceil(c2 * n ** 0.25)))
    m = tuple(2 ** pi_schedule(s, level, q) for s in range(1, l1 + 1))
    return Schedule(CnnArchitecture((int(c4),) * l1, m, d1, d2), FnnArchitecture((int(c5),) * l2),
                    c1 * math.log(n), q, scale, n)


# --------------------------------------------------------------------------
# weight serialization
#
# "HMPW", u16 version, u32 header length, JSON header (architectures, beta,
# array names and shapes), little-endian float64 arrays in header order, then
# the 32-byte SHA-256 of everything before it.


def weights_arrays(cnn: CnnWeights | None, fnn: FnnWeights | None) -> list[tuple[str, np.ndarray]]:
    out = []
    if cnn is not None:
        for r, (w, b) in enumerate(zip(cnn.filters, cnn.biases)):
            out += [(f"cnn.filter.{r}", w), (f"cnn.bias.{r}", b)]
        out.append(("cnn.w_out", cnn.w_out))
    if fnn is not None:
        for r, (w, b) in enumerate(zip(fnn.weights, fnn.biases)):
            out += [(f"fnn.weight.{r}", w), (f"fnn.bias.{r}", b)]
        out += [("fnn.w_out", fnn.w_out), ("fnn.b_out", np.array([fnn.b_out]))]
    return out


def weights_to_bytes(cnn_arch=None, cnn=None, fnn_arch=None, fnn=None, beta=None) -> bytes:
    arrays = weights_arrays(cnn, fnn)
    header = {"cnn_arch": cnn_arch.to_dict() if cnn_arch else None,
              "fnn_arch": fnn_arch.to_dict() if fnn_arch else None, "beta": beta,
              "arrays": [[name, list(a.shape)] for name, a in arrays]}
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(hb)) + hb + body
    return blob + hashlib.sha256(blob).digest()


def weights_from_bytes(blob: bytes) -> dict:
    """Inverse of :func:`weights_to_bytes`; returns a dict with the architectures,
    weights and beta (entries are ``None`` when absent)."""
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError("not an HMPW weights file")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ValueError("weights checksum mismatch")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    header = json.loads(blob[10:10 + hlen])
    pos, arrays = 10 + hlen, {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
    out = {"beta": header["beta"], "cnn_arch": None, "fnn_arch": None, "cnn": None, "fnn": None}
    if header["cnn_arch"]:
        a = CnnArchitecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["cnn_arch"].items()})
        out["cnn_arch"] = a
        out["cnn"] = CnnWeights([arrays[f"cnn.filter.{r}"] for r in range(a.depth)],
                                [arrays[f"cnn.bias.{r}"] for r in range(a.depth)], arrays["cnn.w_out"])
    if header["fnn_arch"]:
        f = FnnArchitecture(tuple(header["fnn_arch"]["widths"]), header["fnn_arch"]["in_dim"])
        out["fnn_arch"] = f
        out["fnn"] = FnnWeights([arrays[f"fnn.weight.{r}"] for r in range(f.depth)],
                                [arrays[f"fnn.bias.{r}"] for r in range(f.depth)],
                                arrays["fnn.w_out"], float(arrays["fnn.b_out"][0]))
    return out
