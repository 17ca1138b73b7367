"""Hierarchical max-pooling models for the aposteriori probability.

A model of level ``l`` is a 4-ary tree of node functions ``g[k, s]`` mapping
R^4 to [0, 1] (``k = 1..l`` the level, ``s = 1..4**(l-k)`` the position).  The
tree evaluates a ``2**l x 2**l`` patch by quadrant recursion, and the model
value on a full image is the maximum of the tree over all window placements.

Node functions come from a few concrete families whose Lipschitz constant
(Euclidean norm) is known in closed form, so Lipschitz-based error bounds can
be checked exactly:

``affine-clamped``
    ``clip(w . z + b, 0, 1)``; Lipschitz ``||w||_2``.
``soft-max-blend``
    ``c0 + c1 * (alpha * smax_tau(z) + (1 - alpha) * mean(z))`` where
    ``smax_tau(z) = tau * log(sum(exp(z / tau))) - tau * log 4`` lies between
    the mean and the max; Lipschitz ``c1 * (alpha + (1 - alpha) / 2)``.
``radial-bump-mixture``
    ``c0 + sum_j a_j exp(-|z - mu_j|^2 / (2 s_j^2))`` with ``a_j >= 0`` and
    ``c0 + sum a_j <= 1``; Lipschitz ``sum_j a_j exp(-1/2) / s_j``.

Two wrapper families are derived from a base node: ``sharpened`` post-composes
``t -> logistic(gamma * logit(t))`` and ``shifted`` adds a constant (used to
build perturbed models, which may leave [0, 1]).

The smoothness exponent ``p`` is carried as metadata only; the families are
smooth, but only the Lipschitz constant is certified.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod

FORMAT_VERSION = 1
BASE_FAMILIES = ("affine-clamped", "soft-max-blend", "radial-bump-mixture")
WRAPPER_FAMILIES = ("sharpened", "shifted")
DEFAULT_LOGIT_CLAMP = 40.0
LIPSCHITZ_SLACK = 1e-9


class ModelError(ValueError):
    """Rejected model input or configuration."""


# --------------------------------------------------------------------------
# scalar helpers


def bayes_classify(eta):
    """Bayes rule: +1 where eta >= 1/2 (ties go to +1), else -1."""
    eta = np.asarray(eta, dtype=float)
    out = np.where(eta >= 0.5, 1, -1)
    return int(out) if out.ndim == 0 else out


def logit(eta, clamp_magnitude: float = DEFAULT_LOGIT_CLAMP):
    """``log(eta / (1 - eta))`` clipped to ``[-clamp, clamp]``; finite at 0 and 1."""
    if not np.isfinite(clamp_magnitude) or clamp_magnitude <= 0:
        raise ModelError("clamp_magnitude must be a positive finite number")
    eta = np.asarray(eta, dtype=float)
    with np.errstate(divide="ignore"):
        raw = np.log(eta) - np.log1p(-eta)
    out = np.clip(raw, -clamp_magnitude, clamp_magnitude)
    return float(out) if out.ndim == 0 else out


def logistic(z):
    z = np.asarray(z, dtype=float)
    out = np.exp(-np.logaddexp(0.0, -z))
    return float(out) if out.ndim == 0 else out


def binary_entropy(eta):
    """``-eta log eta - (1-eta) log(1-eta)`` in nats, with ``0 log 0 = 0``."""
    eta = np.asarray(eta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(eta > 0, -eta * np.log(eta), 0.0)
        b = np.where(eta < 1, -(1 - eta) * np.log1p(-eta), 0.0)
    out = a + b
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class ImageGrid:
    """A grey-scale image with pixel values in [0, 1]; ``pixels[i, j]`` is x_{i+1, j+1}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=float)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ModelError(f"image must be a non-empty 2-d array, got shape {px.shape}")
        if np.isnan(px).any() or px.min() < 0 or px.max() > 1:
            raise ModelError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def d1(self) -> int:
        return self.pixels.shape[0]

    @property
    def d2(self) -> int:
        return self.pixels.shape[1]


def as_pixels(image) -> np.ndarray:
    if isinstance(image, ImageGrid):
        return image.pixels
    return np.asarray(image, dtype=float)


# --------------------------------------------------------------------------
# node functions


def _smax(z: np.ndarray, tau: float) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + tau * np.log(np.exp((z - zmax) / tau).sum(axis=-1))
    return lse - tau * math.log(4.0)


@dataclass(frozen=True)
class NodeFunction:
    """One combiner ``g: R^4 -> R`` of the tree.

    ``params`` is the flat parameter vector of the family; ``lipschitz`` is the
    certified Euclidean Lipschitz constant.  Calling the node on an array of
    shape ``(..., 4)`` returns shape ``(...)``.
    """

    family: str
    params: tuple
    lipschitz: float
    inner: "NodeFunction | None" = None

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        fam, p = self.family, self.params
        if fam == "affine-clamped":
            w = np.asarray(p[:4])
            return np.clip(z @ w + p[4], 0.0, 1.0)
        if fam == "soft-max-blend":
            tau, alpha, c0, c1 = p
            return c0 + c1 * (alpha * _smax(z, tau) + (1 - alpha) * z.mean(axis=-1))
        if fam == "radial-bump-mixture":
            c0, nb = p[0], int(p[1])
            out = np.full(z.shape[:-1], c0)
            for j in range(nb):
                a, s = p[2 + 6 * j], p[3 + 6 * j]
                mu = np.asarray(p[4 + 6 * j: 8 + 6 * j])
                r2 = ((z - mu) ** 2).sum(axis=-1)
                out = out + a * np.exp(-r2 / (2 * s * s))
            return out
        if fam == "sharpened":
            gamma, clamp = p
            t = self.inner(z)
            return logistic(gamma * logit(t, clamp))
        if fam == "shifted":
            return self.inner(z) + p[0]
        raise ModelError(f"unknown node family {fam!r}")

    @property
    def maps_into_unit(self) -> bool:
        """Whether outputs are guaranteed to lie in [0, 1]."""
        if self.family == "shifted":
            return self.params[0] == 0.0 and self.inner.maps_into_unit
        return True

    def to_dict(self) -> dict:
        d = {"family": self.family, "params": [float(v) for v in self.params],
             "lipschitz": float(self.lipschitz)}
        if self.inner is not None:
            d["inner"] = self.inner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeFunction":
        inner = cls.from_dict(d["inner"]) if d.get("inner") else None
        node = cls(d["family"], tuple(float(v) for v in d["params"]), float(d["lipschitz"]), inner)
        _validate_node(node)
        return node


def _validate_node(node: NodeFunction) -> None:
    fam, p = node.family, node.params
    if fam not in BASE_FAMILIES + WRAPPER_FAMILIES:
        raise ModelError(f"unknown node family {fam!r}")
    if fam in WRAPPER_FAMILIES and node.inner is None:
        raise ModelError(f"{fam} node needs an inner node")
    if fam == "soft-max-blend":
        tau, alpha, c0, c1 = p
        if not (tau > 0 and 0 <= alpha <= 1 and c0 >= 0 and c1 >= 0 and c0 + c1 <= 1 + 1e-12):
            raise ModelError(f"invalid soft-max-blend parameters {p}")
    if fam == "radial-bump-mixture":
        nb = int(p[1])
        if len(p) != 2 + 6 * nb:
            raise ModelError("radial-bump-mixture parameter vector has wrong length")
        amps = [p[2 + 6 * j] for j in range(nb)]
        if p[0] < 0 or min(amps, default=0) < 0 or p[0] + sum(amps) > 1 + 1e-12:
            raise ModelError("radial-bump-mixture amplitudes must be >= 0 and sum to <= 1")
    if fam == "affine-clamped" and len(p) != 5:
        raise ModelError("affine-clamped needs 4 weights and a bias")


def affine_node(weights: Sequence[float], bias: float) -> NodeFunction:
    w = tuple(float(v) for v in weights)
    if len(w) != 4:
        raise ModelError("affine-clamped node needs exactly 4 weights")
    return NodeFunction("affine-clamped", w + (float(bias),), float(np.linalg.norm(w)))


def constant_node(value: float) -> NodeFunction:
    if not 0 <= value <= 1:
        raise ModelError("constant node value must lie in [0, 1]")
    return affine_node((0.0, 0.0, 0.0, 0.0), value)


def softmax_blend_node(tau: float, alpha: float, c0: float, c1: float) -> NodeFunction:
    node = NodeFunction("soft-max-blend", (float(tau), float(alpha), float(c0), float(c1)),
                        float(c1 * (alpha + (1 - alpha) / 2)))
    _validate_node(node)
    return node


def bump_node(c0: float, amplitudes, widths, centers) -> NodeFunction:
    params = [float(c0), float(len(amplitudes))]
    lip = 0.0
    for a, s, mu in zip(amplitudes, widths, centers):
        params += [float(a), float(s)] + [float(m) for m in mu]
        lip += a * math.exp(-0.5) / s
    node = NodeFunction("radial-bump-mixture", tuple(params), float(lip))
    _validate_node(node)
    return node


def sharpen_node(node: NodeFunction, gamma: float, clamp: float = DEFAULT_LOGIT_CLAMP) -> NodeFunction:
    # t -> logistic(gamma * logit(t)) has slope at most gamma (attained at 1/2)
    return NodeFunction("sharpened", (float(gamma), float(clamp)), node.lipschitz * max(gamma, 1.0), node)


def shift_node(node: NodeFunction, delta: float) -> NodeFunction:
    return NodeFunction("shifted", (float(delta),), node.lipschitz, node)


# --------------------------------------------------------------------------
# the model


def node_keys(level: int) -> list[tuple[int, int]]:
    return [(k, s) for k in range(1, level + 1) for s in range(1, 4 ** (level - k) + 1)]


def quadrant_offsets(k: int) -> tuple[tuple[int, int], ...]:
    """Offsets of the four arguments of a level-``k`` node inside its 2^k block.

    Level 1 takes ``(x11, x12, x21, x22)``; higher levels take the quadrants
    in the order top-left, shifted in the first coordinate, shifted in the
    second coordinate, shifted in both.
    """
    if k == 1:
        return ((0, 0), (0, 1), (1, 0), (1, 1))
    h = 2 ** (k - 1)
    return ((0, 0), (h, 0), (0, h), (h, h))


@dataclass(frozen=True)
class HmpModel:
    level: int
    nodes: tuple
    d1: int
    d2: int
    smoothness: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.level < 1:
            raise ModelError("level must be >= 1")
        if len(self.nodes) != (4 ** self.level - 1) // 3:
            raise ModelError(f"level {self.level} needs {(4 ** self.level - 1) // 3} nodes, got {len(self.nodes)}")
        if 2 ** self.level > min(self.d1, self.d2):
            raise ModelError("window 2^l exceeds the image size")

    @property
    def window(self) -> int:
        return 2 ** self.level

    @property
    def lipschitz(self) -> float:
        return max(n.lipschitz for n in self.nodes)

    def node(self, k: int, s: int) -> NodeFunction:
        return self.nodes[node_keys(self.level).index((k, s))]

    def with_node(self, k: int, s: int, node: NodeFunction) -> "HmpModel":
        nodes = list(self.nodes)
        nodes[node_keys(self.level).index((k, s))] = node
        return replace(self, nodes=tuple(nodes))

    @property
    def model_id(self) -> str:
        blob = json.dumps(self.to_dict(with_id=False), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self, with_id: bool = True) -> dict:
        d = {"format": "hmp-model", "version": FORMAT_VERSION, "level": self.level,
             "d1": self.d1, "d2": self.d2, "smoothness": self.smoothness,
             "lipschitz": self.lipschitz,
             "nodes": [dict(k=k, s=s, **n.to_dict()) for (k, s), n in zip(node_keys(self.level), self.nodes)]}
        if with_id:
            d["model_id"] = self.model_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HmpModel":
        if d.get("format") != "hmp-model" or d.get("version") != FORMAT_VERSION:
            raise ModelError("not a version-1 hmp-model document")
        keys = node_keys(d["level"])
        got = [(n["k"], n["s"]) for n in d["nodes"]]
        if got != keys:
            raise ModelError("node list is not in canonical (k, s) order")
        nodes = tuple(NodeFunction.from_dict(n) for n in d["nodes"])
        return cls(d["level"], nodes, d["d1"], d["d2"], d.get("smoothness", 1.0))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "HmpModel":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# evaluation


def block_values(nodes, level: int, images: np.ndarray) -> np.ndarray:
    """Tree value for every window placement.

    ``nodes`` maps ``(k, s)`` to a callable on ``(..., 4)`` arrays (an
    :class:`HmpModel` node tuple is accepted too).  ``images`` has shape
    ``(B, d1, d2)``; the result has shape ``(B, d1 - 2^l + 1, d2 - 2^l + 1)``.
    """
    if not isinstance(nodes, dict):
        nodes = dict(zip(node_keys(level), nodes))
    x = np.asarray(images, dtype=float)
    d1, d2 = x.shape[-2:]
    prev = None
    for k in range(1, level + 1):
        size = 2 ** k
        n1, n2 = d1 - size + 1, d2 - size + 1
        offs = quadrant_offsets(k)
        cur = []
        for s in range(1, 4 ** (level - k) + 1):
            if k == 1:
                args = [x[:, a:a + n1, b:b + n2] for a, b in offs]
            else:
                args = [prev[4 * (s - 1) + q][:, a:a + n1, b:b + n2] for q, (a, b) in enumerate(offs)]
            cur.append(np.asarray(nodes[(k, s)](np.stack(args, axis=-1)), dtype=float))
        prev = cur
    return prev[0]


def eval_hierarchical(model: HmpModel, patch) -> float | np.ndarray:
    """Tree value ``f_{l,1}`` of a ``2^l x 2^l`` patch (or a batch of patches)."""
    x = as_pixels(patch)
    w = model.window
    if x.shape[-2:] != (w, w):
        raise ModelError(f"patch must be {w}x{w}, got {x.shape[-2:]}")
    if np.isnan(x).any():
        raise ModelError("patch contains NaN")
    single = x.ndim == 2
    v = block_values(model.nodes, model.level, x.reshape(-1, w, w))[:, 0, 0]
    return float(v[0]) if single else v.reshape(x.shape[:-2])


def eval_max_pool(model: HmpModel, image) -> float | np.ndarray:
    """``m(x)``: maximum of the tree over all window placements.

    Accepts an :class:`ImageGrid`, a 2-d array, or a batch ``(B, d1, d2)``.
    """
    x = as_pixels(image)
    if x.ndim < 2 or min(x.shape[-2:]) < model.window:
        raise ModelError(f"image smaller than the {model.window}x{model.window} window")
    if np.isnan(x).any():
        raise ModelError("image contains NaN")
    single = x.ndim == 2
    xb = x.reshape(-1, *x.shape[-2:])
    v = block_values(model.nodes, model.level, xb).reshape(len(xb), -1).max(axis=1)
    return float(v[0]) if single else v.reshape(x.shape[:-2])


def eta(model: HmpModel, images: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Batched ``eval_max_pool`` over ``(B, d1, d2)``, chunked to bound memory."""
    images = np.asarray(images, dtype=float)
    out = np.empty(len(images))
    for i in range(0, len(images), chunk):
        out[i:i + chunk] = eval_max_pool(model, images[i:i + chunk])
    return out


# --------------------------------------------------------------------------
# generation


def _draw_node(family: str, spec: dict, rng: np.random.Generator) -> NodeFunction:
    if family == "constant":
        return constant_node(float(spec["value"]))
    if family == "affine-clamped":
        if "weights" in spec:
            return affine_node(spec["weights"], spec.get("bias", 0.0))
        gain = float(spec.get("gain", 1.0))
        w = gain * rng.dirichlet(np.ones(4))
        if spec.get("signed", False):
            w = w * rng.choice([-1.0, 1.0], size=4)
        lo, hi = spec.get("bias_range", (-0.25, 0.25))
        return affine_node(w, rng.uniform(lo, hi))
    if family == "soft-max-blend":
        tau = spec.get("tau") or rng.uniform(0.05, 0.3)
        alpha = spec.get("alpha") if spec.get("alpha") is not None else rng.uniform(0.3, 0.9)
        c1 = spec.get("c1") if spec.get("c1") is not None else rng.uniform(0.6, 1.0)
        c0 = spec.get("c0") if spec.get("c0") is not None else rng.uniform(0.0, 1.0 - c1)
        return softmax_blend_node(tau, alpha, c0, c1)
    if family == "radial-bump-mixture":
        nb = int(spec.get("bumps", 3))
        c0 = rng.uniform(0.0, 0.2)
        amps = rng.dirichlet(np.ones(nb)) * (1 - c0) * rng.uniform(0.5, 1.0)
        widths = rng.uniform(*spec.get("width_range", (0.3, 0.8)), size=nb)
        centers = rng.uniform(0.0, 1.0, size=(nb, 4))
        return bump_node(c0, amps, widths, centers)
    raise ModelError(f"unknown node family {family!r}")


def make_model(level: int, family_spec: dict | str, seed: int, d1: int | None = None,
               d2: int | None = None, smoothness: float = 1.0) -> HmpModel:
    """Draw a model of the given level with all nodes from one family.

    ``family_spec`` is a family tag or a dict with key ``family`` plus
    family options (``constant`` takes ``value``; ``affine-clamped`` takes
    ``weights``/``bias`` or ``gain``/``bias_range``/``signed``; a
    ``root`` sub-dict overrides options for the root node only).
    """
    if isinstance(family_spec, str):
        family_spec = {"family": family_spec}
    family = family_spec.get("family")
    if family not in BASE_FAMILIES + ("constant",):
        raise ModelError(f"unknown node family {family!r}")
    if level < 1:
        raise ModelError("level must be >= 1")
    d1 = d1 or 2 ** level
    d2 = d2 or d1
    rng = rngmod.stream(seed, rngmod.MODEL)
    root_spec = {**family_spec, **family_spec.get("root", {})}
    nodes = []
    for k, s in node_keys(level):
        spec = root_spec if k == level else family_spec
        nodes.append(_draw_node(family, spec, rng))
    return HmpModel(level, tuple(nodes), d1, d2, smoothness,
                    meta={"family": family, "seed": int(seed)})


def lipschitz_audit(node: NodeFunction, pairs: int, seed: int, box: tuple = (0.0, 1.0)) -> float:
    """Largest sampled ratio ``|g(a) - g(b)| / |a - b|`` over random pairs."""
    rng = rngmod.stream(seed, rngmod.AUDIT)
    a = rng.uniform(*box, size=(pairs, 4))
    # half the pairs are close together to probe local slopes
    b = np.where(np.arange(pairs)[:, None] % 2 == 0, rng.uniform(*box, size=(pairs, 4)),
                 a + rng.normal(scale=1e-3, size=(pairs, 4)))
    dist = np.linalg.norm(a - b, axis=1)
    ok = dist > 0
    return float((np.abs(node(a) - node(b))[ok] / dist[ok]).max())


# --------------------------------------------------------------------------
# perturbation bound


def _affine_shift_sup(g: NodeFunction, h: NodeFunction) -> float:
    """Exact sup over [-2,2]^4 of |g - h| for clamped affines sharing weights."""
    w = np.asarray(g.params[:4])
    b, delta = g.params[4], h.params[4] - g.params[4]
    span = 2.0 * np.abs(w).sum()
    lo, hi = b - span, b + span
    cand = [lo, hi] + [u for u in (0.0, 1.0, -delta, 1.0 - delta) if lo < u < hi]
    u = np.asarray(cand)
    return float(np.abs(np.clip(u, 0, 1) - np.clip(u + delta, 0, 1)).max())


def _grid(resolution: int) -> np.ndarray:
    axis = np.linspace(-2.0, 2.0, resolution)
    return np.array(list(product(axis, repeat=4)))


def node_sup_distance(g: NodeFunction, h: NodeFunction, resolution: int = 21) -> tuple[float, bool]:
    """``sup_{[-2,2]^4} |g - h|`` and whether the value is exact.

    Exact cases: identical nodes, ``h`` a constant shift of ``g``, and two
    clamped affines with equal weights (a one-dimensional piecewise-linear
    problem).  Otherwise the supremum is estimated on a regular grid.
    """
    if g == h:
        return 0.0, True
    if h.family == "shifted" and h.inner == g:
        return abs(h.params[0]), True
    if g.family == h.family == "affine-clamped" and g.params[:4] == h.params[:4]:
        return _affine_shift_sup(g, h), True
    z = _grid(resolution)
    return float(np.abs(g(z) - h(z)).max()), False


def node_sup_abs(node: NodeFunction, resolution: int = 21) -> float:
    return float(np.abs(node(_grid(resolution))).max())


def lemma8_gap_and_bound(model: HmpModel, perturbed: HmpModel, image, lipschitz: float | None = None,
                         resolution: int = 21) -> dict:
    """Compare ``|m(x) - m_bar(x)|`` with ``(2C+1)^l * max_node sup|g - g_bar|``.

    Returns a dict with ``gap``, ``bound``, ``supdist`` and ``exact`` (all node
    distances computed exactly).  ``image`` may be a batch, in which case
    ``gap`` is an array.
    """
    if model.level != perturbed.level:
        raise ModelError("models must share the level")
    if (model.d1, model.d2) != (perturbed.d1, perturbed.d2):
        raise ModelError("models must share the image dimensions")
    C = model.lipschitz if lipschitz is None else lipschitz
    dists = [node_sup_distance(g, h, resolution) for g, h in zip(model.nodes, perturbed.nodes)]
    supdist = max(d for d, _ in dists)
    gap = np.abs(np.asarray(eval_max_pool(model, image)) - np.asarray(eval_max_pool(perturbed, image)))
    return {"gap": float(gap) if gap.ndim == 0 else gap,
            "bound": (2 * C + 1) ** model.level * supdist,
            "supdist": supdist, "lipschitz": C, "exact": all(e for _, e in dists)}


def perturb_model(model: HmpModel, delta: float | Sequence[float], mode: str = "shift") -> HmpModel:
    """Perturb every node.

    ``mode="shift"`` adds ``delta`` to each node output (may leave [0, 1]);
    ``mode="bias"`` moves the bias of clamped-affine nodes (stays in [0, 1]).
    ``delta`` may be one value or one per node.
    """
    deltas = np.broadcast_to(np.asarray(delta, dtype=float), (len(model.nodes),))
    nodes = []
    for n, dv in zip(model.nodes, deltas):
        if dv == 0:
            nodes.append(n)
        elif mode == "shift":
            if abs(dv) > 1:
                raise ModelError("shift larger than 1 breaks the [-2, 2] boundedness hypothesis")
            nodes.append(shift_node(n, float(dv)))
        elif mode == "bias":
            if n.family != "affine-clamped":
                raise ModelError("bias perturbation needs clamped-affine nodes")
            nodes.append(affine_node(n.params[:4], n.params[4] + float(dv)))
        else:
            raise ModelError(f"unknown perturbation mode {mode!r}")
    return replace(model, nodes=tuple(nodes))
