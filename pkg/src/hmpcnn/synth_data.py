"""Labelled image samples drawn from a known hierarchical max-pooling model.

Images are drawn block-wise: sample ``i`` lives in block ``i // BLOCK`` and
every block has its own random stream ``(seed, DATA, block)``.  Within a block
the pixels are drawn first and the label uniforms second, so the first ``m``
samples of a size-``n`` dataset are exactly the size-``m`` dataset with the
same seed.  Pixels are drawn as 32-bit floats (then widened), which makes the
binary dataset format lossless for images.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import rng as rngmod
from .hmp_model import HmpModel, eta as model_eta, logit, sharpen_node

BLOCK = 256
MAGIC = b"HMPD"
VERSION = 1


def _texture(rng: np.random.Generator, count: int, d1: int, d2: int) -> np.ndarray:
    """Smooth random textures: a few random plane waves squashed into [0, 1]."""
    ii = np.arange(d1)[:, None] / d1
    jj = np.arange(d2)[None, :] / d2
    freq = rng.uniform(0.0, 2.0, size=(count, 3, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=(count, 3))
    amp = rng.uniform(0.0, 1.0, size=(count, 3))
    waves = amp[..., None, None] * np.cos(
        2 * np.pi * (freq[..., 0, None, None] * ii + freq[..., 1, None, None] * jj) + phase[..., None, None])
    return (0.5 + waves.sum(axis=1) / 6.0).astype(np.float32)


def sample_images(d1: int, d2: int, n: int, seed: int, purpose: int = rngmod.DATA,
                  law: str = "uniform") -> tuple[np.ndarray, np.ndarray]:
    """Images ``(n, d1, d2)`` and label uniforms ``(n,)`` from block streams."""
    if law not in ("uniform", "texture"):
        raise ValueError(f"unknown pixel law {law!r}")
    images = np.empty((n, d1, d2))
    unif = np.empty(n)
    for b in range((n + BLOCK - 1) // BLOCK):
        g = rngmod.stream(seed, purpose, b)
        if law == "uniform":
            px = g.random((BLOCK, d1, d2), dtype=np.float32)
        else:
            px = _texture(g, BLOCK, d1, d2)
        u = g.random(BLOCK)
        lo, hi = b * BLOCK, min(n, (b + 1) * BLOCK)
        images[lo:hi] = px[:hi - lo]
        unif[lo:hi] = u[:hi - lo]
    return images, unif


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray    # (n, d1, d2) float64 holding float32-exact values
    labels: np.ndarray    # (n,) int8 in {-1, +1}
    true_eta: np.ndarray  # (n,)
    seed: int
    model_id: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d1(self) -> int:
        return self.images.shape[1]

    @property
    def d2(self) -> int:
        return self.images.shape[2]

    def prefix(self, m: int) -> "Dataset":
        return replace(self, images=self.images[:m], labels=self.labels[:m], true_eta=self.true_eta[:m])


def sample_dataset(model: HmpModel, n: int, seed: int, law: str = "uniform") -> Dataset:
    """``n`` i.i.d. samples; ``Y = +1`` with probability ``eta(X)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    images, unif = sample_images(model.d1, model.d2, n, seed, law=law)
    e = model_eta(model, images)
    labels = np.where(unif < e, 1, -1).astype(np.int8)
    return Dataset(images, labels, e, int(seed), model.model_id)


def sharpen_margin(model: HmpModel, gamma: float, clamp: float = 40.0) -> HmpModel:
    """Post-compose the root with ``t -> logistic(gamma * logit(t))``.

    The decision boundary ``eta = 1/2`` is unchanged while the aposteriori
    probability is pushed toward 0 and 1.  All non-root nodes are kept as-is.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    root = model.node(model.level, 1)
    return model.with_node(model.level, 1, sharpen_node(root, gamma, clamp))


def margin_condition_estimate(model: HmpModel, n: int, mc: int, seed: int,
                              threshold: float | None = None) -> tuple[float, float]:
    """Monte Carlo ``P{|logit eta(X)| > threshold}`` with its standard error.

    The default threshold is ``log(n) / 2``, the margin condition for the fast
    rate.  Returns ``(estimate, stderr)``.
    """
    if mc < 1:
        raise ValueError("mc must be >= 1")
    t = 0.5 * np.log(n) if threshold is None else threshold
    images, _ = sample_images(model.d1, model.d2, mc, seed, purpose=rngmod.EVAL)
    hit = np.abs(logit(model_eta(model, images))) > t
    p = float(hit.mean())
    return p, float(np.sqrt(p * (1 - p) / mc))


# --------------------------------------------------------------------------
# file formats
#
# header: magic "HMPD", u16 version, u32 d1, u32 d2, u64 n, u64 seed,
#         16-byte ascii model id; then n records of
#         d1*d2 float32 pixels (row-major), int8 label, float32 true eta.

_HEADER = struct.Struct("<4sHIIQQ16s")


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, d1, d2 = ds.images.shape
    head = _HEADER.pack(MAGIC, VERSION, d1, d2, n, ds.seed, ds.model_id.encode("ascii").ljust(16)[:16])
    rec = np.dtype([("px", "<f4", (d1 * d2,)), ("y", "i1"), ("eta", "<f4")])
    body = np.empty(n, dtype=rec)
    body["px"] = ds.images.reshape(n, -1)
    body["y"] = ds.labels
    body["eta"] = ds.true_eta
    return head + body.tobytes()


def dataset_from_bytes(blob: bytes) -> Dataset:
    magic, version, d1, d2, n, seed, mid = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a version-1 HMPD dataset")
    rec = np.dtype([("px", "<f4", (d1 * d2,)), ("y", "i1"), ("eta", "<f4")])
    body = np.frombuffer(blob, dtype=rec, count=n, offset=_HEADER.size)
    return Dataset(body["px"].astype(float).reshape(n, d1, d2), body["y"].astype(np.int8),
                   body["eta"].astype(float), int(seed), mid.decode("ascii").strip())


def dataset_to_csv(ds: Dataset) -> str:
    n, d1, d2 = ds.images.shape
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label", "true_eta"] + [f"x_{i + 1}_{j + 1}" for i in range(d1) for j in range(d2)])
    for i in range(n):
        w.writerow([i, int(ds.labels[i]), repr(float(np.float32(ds.true_eta[i])))]
                   + [repr(float(v)) for v in ds.images[i].ravel()])
    return buf.getvalue()
