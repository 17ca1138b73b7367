"""Explicit network constructions.

Two builders live here:

* a deep ReLU network of width 7 that realises the piecewise-linear
  interpolant of the logit on the knots ``k/K`` (the link from a probability
  estimate to a real-valued score);
* a compiler that turns one small ReLU network per tree node into a single
  zero-padded CNN whose output equals the max-pooled tree of those networks.

Width-7 layer layout
--------------------
Every hidden layer holds seven neurons ``n1..n7``.  Four "tracks" are linear
read-outs of a layer::

    F1 = n1 + a_{j-2} * (n5 - 2 n6 + n7)      F2 = n2      F3 = n3      F4 = n4

where ``j`` is the layer index.  Layer ``j`` computes ``n1 = relu(F1 - F2)``,
``n2 = relu(F2 - F1)`` (so ``n1 - n2`` carries the partial sum),
``n3 = relu(F3 - F4)``, ``n4 = relu(F4 - F3)`` (so ``F3 - F4`` carries the
input ``z``) and the hat gadget ``n5, n6, n7 = relu(K z - (k-1)), relu(K z - k),
relu(K z - (k+1))`` for ``k = j - 2``.  Layer 1 reads ``z`` directly and has
``n1 = n2 = 0``.  After ``K + 3`` layers ``F1 - F2`` is the full hat sum.

CNN layout
----------
See :func:`compile_hmp_to_cnn`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .cnn_model import CnnArchitecture, CnnWeights, FnnArchitecture, FnnWeights, ShapeError, fnn_forward, relu
from .hmp_model import block_values, node_keys, quadrant_offsets


# --------------------------------------------------------------------------
# hat functions and the width-7 network


def _logit(z: float) -> float:
    return math.log(z / (1.0 - z))


@dataclass(frozen=True)
class HatBasis:
    K: int
    knots: tuple     # a_k for k = -1..K+1

    def __post_init__(self):
        if self.K < 6:
            raise ValueError("K must be >= 6")
        if len(self.knots) != self.K + 3:
            raise ValueError("need K + 3 knot values")

    @classmethod
    def logit(cls, K: int) -> "HatBasis":
        if K < 6:
            raise ValueError("K must be >= 6")
        a = [_logit(min(max(k, 1), K - 1) / K) for k in range(-1, K + 2)]
        return cls(K, tuple(a))

    def a(self, k: int) -> float:
        return self.knots[k + 1]


def hat(z, k: int, K: int):
    """Tent at ``k/K``: 1 there, 0 outside ``((k-1)/K, (k+1)/K)``."""
    if not -1 <= k <= K + 1:
        raise ValueError(f"knot index {k} outside -1..{K + 1}")
    z = np.asarray(z, dtype=float)
    out = np.maximum(0.0, 1.0 - np.abs(K * z - k))
    return float(out) if out.ndim == 0 else out


def hat_relu(z, k: int, K: int):
    """The same tent written with three ReLUs."""
    z = np.asarray(z, dtype=float)
    out = relu(K * z - (k - 1)) - 2 * relu(K * z - k) + relu(K * z - (k + 1))
    return float(out) if out.ndim == 0 else out


def lemma7_eval_direct(basis: HatBasis, z):
    """``sum_{k=-1}^{K+1} a_k B_k(z)``."""
    z = np.asarray(z, dtype=float)
    out = sum(basis.a(k) * np.maximum(0.0, 1.0 - np.abs(basis.K * z - k)) for k in range(-1, basis.K + 2))
    return float(out) if out.ndim == 0 else out


def lemma7_tracks(basis: HatBasis, z) -> list[np.ndarray]:
    """Run the layer recursion; entry ``j-1`` holds tracks ``(F1, F2, F3, F4)`` of layer ``j``
    stacked along the first axis."""
    K = basis.K
    z = np.asarray(z, dtype=float)
    out = []
    f1 = f2 = np.zeros_like(z)
    x = z
    for j in range(1, K + 4):
        k = j - 2
        if j == 1:
            n1 = n2 = np.zeros_like(z)
            n3, n4 = relu(z), relu(-z)
        else:
            n1, n2 = relu(f1 - f2), relu(f2 - f1)
            n3, n4 = relu(f3 - f4), relu(f4 - f3)
        n5, n6, n7 = relu(K * x - (k - 1)), relu(K * x - k), relu(K * x - (k + 1))
        f1 = n1 + basis.a(k) * (n5 - 2 * n6 + n7)
        f2, f3, f4 = n2, n3, n4
        x = f3 - f4
        out.append(np.stack([f1, f2, f3, f4]))
    return out


def lemma7_network(basis: HatBasis) -> tuple[FnnArchitecture, FnnWeights]:
    """The recursion as plain fully connected weights (``K + 3`` layers of width 7)."""
    K = basis.K
    weights, biases = [], []
    # layer 1
    w = np.zeros((7, 1))
    w[2, 0], w[3, 0] = 1.0, -1.0
    w[4:, 0] = K
    weights.append(w)
    biases.append(np.array([0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0]))
    for j in range(2, K + 4):
        k, kp = j - 2, j - 3
        # tracks of the previous layer as rows over its neurons
        F1 = np.array([1.0, 0, 0, 0, basis.a(kp), -2 * basis.a(kp), basis.a(kp)])
        F2 = np.eye(7)[1]
        F3, F4 = np.eye(7)[2], np.eye(7)[3]
        xz = F3 - F4
        w = np.stack([F1 - F2, F2 - F1, F3 - F4, F4 - F3, K * xz, K * xz, K * xz])
        weights.append(w)
        biases.append(np.array([0.0, 0.0, 0.0, 0.0, -(k - 1.0), -float(k), -(k + 1.0)]))
    a_last = basis.a(K + 1)
    w_out = np.array([1.0, -1.0, 0, 0, a_last, -2 * a_last, a_last])
    return FnnArchitecture((7,) * (K + 3)), FnnWeights(weights, biases, w_out, 0.0)


def lemma7_eval_network(basis: HatBasis, z):
    """Forward pass of :func:`lemma7_network`."""
    arch, w = lemma7_network(basis)
    return fnn_forward(arch, w, z)


def lemma7_loss_gap(eta, g_bar, K: int, basis: HatBasis | None = None) -> float:
    """Largest pointwise logistic-loss gap from plugging ``g_bar`` into the
    interpolant instead of using the exact logit of ``eta``.

    Per point: ``|eta phi(f_bar) - eta phi(logit eta)| + |(1-eta) phi(-f_bar) - (1-eta) phi(-logit eta)|``
    with ``eta * phi(logit eta) = -eta log eta`` (0 at ``eta = 0``).  The sup is
    over the supplied evaluation points only.
    """
    basis = basis or HatBasis.logit(K)
    eta = np.asarray(eta, dtype=float)
    fb = np.asarray(lemma7_eval_network(basis, np.asarray(g_bar, dtype=float)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ent_pos = np.where(eta > 0, -eta * np.log(eta), 0.0)
        ent_neg = np.where(eta < 1, -(1 - eta) * np.log1p(-eta), 0.0)
    t1 = np.abs(eta * np.logaddexp(0.0, -fb) - ent_pos)
    t2 = np.abs((1 - eta) * np.logaddexp(0.0, fb) - ent_neg)
    return float((t1 + t2).max())


def lemma7_envelope(K: int) -> float:
    """``6/(K-3) + 4 log(K)/K``: the loss-gap envelope near eta = 0 or 1."""
    return 6.0 / (K - 3) + 4.0 * math.log(K) / K


# --------------------------------------------------------------------------
# node networks


def random_node_net(L_net: int, r_net: int, rng: np.random.Generator, scale: float = 1.0) -> FnnWeights:
    ws, bs, prev = [], [], 4
    for _ in range(L_net):
        ws.append(rng.uniform(-scale, scale, size=(r_net, prev)) / math.sqrt(prev))
        bs.append(rng.uniform(-0.5 * scale, 0.5 * scale, size=r_net))
        prev = r_net
    return FnnWeights(ws, bs, rng.uniform(-scale, scale, size=r_net) / math.sqrt(r_net), float(rng.uniform(-0.5, 0.5)))


def random_node_nets(level: int, L_net: int, r_net: int, seed: int) -> dict:
    g = rngmod.stream(seed, rngmod.MODEL, 9)
    return {key: random_node_net(L_net, r_net, g) for key in node_keys(level)}


def mean_node_net(L_net: int, r_net: int) -> FnnWeights:
    """Exact 4-input mean.

    With ``r_net >= 8`` each input is passed through as ``relu(z), relu(-z)``
    so any real input works; with ``4 <= r_net < 8`` only ``relu(z)`` is kept,
    which is exact for nonnegative inputs such as pixels.
    """
    if r_net < 4:
        raise ValueError("the mean needs r_net >= 4")
    signed = r_net >= 8
    w1 = np.zeros((r_net, 4))
    w1[np.arange(4), np.arange(4)] = 1.0
    if signed:
        w1[4 + np.arange(4), np.arange(4)] = -1.0
    ws, bs = [w1], [np.zeros(r_net)]
    for _ in range(L_net - 1):
        ws.append(np.eye(r_net))
        bs.append(np.zeros(r_net))
    w_out = np.zeros(r_net)
    w_out[:4] = 0.25
    if signed:
        w_out[4:8] = -0.25
    return FnnWeights(ws, bs, w_out, 0.0)


def fit_node_net(target, L_net: int, r_net: int, samples: int, seed: int, box=(0.0, 1.0)) -> FnnWeights:
    """Fit a node network to a callable ``target: (..., 4) -> (...)``.

    Hidden layers are random ReLU features; the output layer is the least
    squares fit on ``samples`` uniform points of ``box^4``.
    """
    g = rngmod.stream(seed, rngmod.MODEL, 10)
    net = random_node_net(L_net, r_net, g, scale=2.0)
    z = g.uniform(*box, size=(samples, 4))
    h = z
    for w, b in zip(net.weights, net.biases):
        h = relu(h @ w.T + b)
    design = np.hstack([h, np.ones((samples, 1))])
    coef, *_ = np.linalg.lstsq(design, np.asarray(target(z), dtype=float), rcond=None)
    return FnnWeights(net.weights, net.biases, coef[:-1], float(coef[-1]))


def node_net_shape(net: FnnWeights) -> tuple[int, int]:
    """``(L_net, r_net)`` of a node network; rejects ragged widths or wrong input size."""
    widths = {w.shape[0] for w in net.weights}
    if len(widths) != 1 or net.weights[0].shape[1] != 4:
        raise ShapeError("node nets need 4 inputs and a constant hidden width")
    r = widths.pop()
    net.check(FnnArchitecture((r,) * len(net.weights), in_dim=4))
    return len(net.weights), r


def hierarchical_eval_nets(node_nets: dict, level: int, images) -> np.ndarray:
    """Max-pooled tree built from node networks (the compiler's oracle)."""
    L, r = node_net_shape(next(iter(node_nets.values())))
    arch = FnnArchitecture((r,) * L, in_dim=4)
    fns = {key: (lambda z, w=w: fnn_forward(arch, w, z)) for key, w in node_nets.items()}
    x = np.asarray(images, dtype=float)
    single = x.ndim == 2
    xb = x.reshape(-1, *x.shape[-2:])
    v = block_values(fns, level, xb).reshape(len(xb), -1).max(axis=1)
    return float(v[0]) if single else v


# --------------------------------------------------------------------------
# compiler


def compiled_sizes(level: int, L_net: int, r_net: int) -> tuple[int, int, tuple]:
    """``(layers, channels per layer, filter sizes)`` of the compiled CNN."""
    from .cnn_model import pi_schedule
    layers = (4 ** level - 1) // 3 * L_net + level
    channels = (2 * 4 ** level + 4) // 3 + r_net
    return layers, channels, tuple(2 ** pi_schedule(s, level, L_net) for s in range(1, layers + 1))


def compile_hmp_to_cnn(node_nets: dict, level: int, d1: int, d2: int) -> tuple[CnnArchitecture, CnnWeights]:
    """Compile per-node networks into one CNN computing the max-pooled tree.

    Layer layout.  Level ``k`` (``n_k = 4^(l-k)`` nodes) occupies a block of
    ``n_k * L_net + 1`` consecutive layers, all with filter size ``2^k``.
    Inside the block, node ``s`` computes its hidden layer ``t`` in block
    layer ``(s-1) L_net + t`` and writes its output ``v`` as the pair
    ``relu(v), relu(-v)`` in block layer ``s L_net + 1``.  Only a node's first
    hidden layer looks at other spatial positions: it reads its four inputs at
    the quadrant offsets of the level (filter taps); every other connection
    uses tap ``(0, 0)``.  A channel map value at position ``(i, j)`` always
    refers to the block whose top-left pixel is ``(i, j)``.

    Channels of a layer in level ``k``: ``[0, r_net)`` hidden units of the
    active node; then the carried inputs of the level (one pixel channel for
    level 1, the output pairs of all level ``k-1`` nodes otherwise); then the
    output pairs of the level's nodes finished so far.  Carries are identity
    taps, exact because every carried value is nonnegative.  Remaining
    channels are zero.  The CNN output weights read ``relu(v) - relu(-v)``
    of the root.
    """
    keys = node_keys(level)
    if set(node_nets) != set(keys):
        raise ShapeError(f"need one node net per key {keys}")
    shapes = {node_net_shape(node_nets[k]) for k in keys}
    if len(shapes) != 1:
        raise ShapeError("all node nets must share depth and width")
    L, r = shapes.pop()
    if 2 ** level > min(d1, d2):
        raise ShapeError("window 2^l exceeds the image size")
    n_layers, n_ch, filters = compiled_sizes(level, L, r)
    arch = CnnArchitecture((n_ch,) * n_layers, filters, d1, d2)
    cnn = CnnWeights.zeros(arch)

    def n_in(k):
        return 1 if k == 1 else 2 * 4 ** (level - k + 1)

    def out_ch(k, s):          # output pair of node s at level k, within the level-k layout
        return r + n_in(k) + 2 * (s - 1)

    g = 0                      # global layer index (0-based into cnn.filters)
    for k in range(1, level + 1):
        nk = 4 ** (level - k)
        offs = quadrant_offsets(k)
        for b in range(1, nk * L + 2):
            w, bias = cnn.filters[g], cnn.biases[g]
            first = b == 1

            # where the level's inputs sit in the previous layer
            def src(c, part):
                if k == 1:
                    return 0 if (first and g == 0) else r
                if first:
                    return out_ch(k - 1, c) + part
                return r + 2 * (c - 1) + part

            assert w.shape[0] == 2 ** k, f"layer {g + 1} filter size differs from 2^{k}"
            # carry inputs
            if b <= nk * L:
                if k == 1:
                    w[0, 0, src(0, 0), r] = 1.0
                else:
                    for c in range(1, n_in(k) // 2 + 1):
                        for part in (0, 1):
                            w[0, 0, src(c, part), r + 2 * (c - 1) + part] = 1.0
            # carry finished outputs
            for s in range(1, nk + 1):
                if s * L + 1 < b:
                    for part in (0, 1):
                        w[0, 0, out_ch(k, s) + part, out_ch(k, s) + part] = 1.0
            # emit output of the node whose last hidden layer was the previous layer
            if (b - 1) % L == 0 and b > 1:
                s = (b - 1) // L
                net = node_nets[(k, s)]
                w[0, 0, :r, out_ch(k, s)] = net.w_out
                w[0, 0, :r, out_ch(k, s) + 1] = -net.w_out
                bias[out_ch(k, s)] = net.b_out
                bias[out_ch(k, s) + 1] = -net.b_out
            # hidden layer of the active node
            s, t = (b - 1) // L + 1, (b - 1) % L
            if s <= nk:
                net = node_nets[(k, s)]
                if t == 0:
                    W1 = net.weights[0]           # (r, 4)
                    for q, (a1, a2) in enumerate(offs):
                        if k == 1:
                            w[a1, a2, src(0, 0), :r] += W1[:, q]
                        else:
                            c = 4 * (s - 1) + q + 1
                            w[a1, a2, src(c, 0), :r] += W1[:, q]
                            w[a1, a2, src(c, 1), :r] -= W1[:, q]
                else:
                    w[0, 0, :r, :r] = net.weights[t].T
                bias[:r] = net.biases[t]
            g += 1
    assert g == n_layers
    cnn.w_out[out_ch(level, 1)] = 1.0
    cnn.w_out[out_ch(level, 1) + 1] = -1.0
    cnn.check(arch)
    return arch, cnn

