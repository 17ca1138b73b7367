"""Cross-entropy empirical risk minimisation over the truncated CNN class.

Backpropagation is written out by hand.  Subgradient conventions:

* ``relu'(0) = 0``;
* the global max-pool routes the gradient to the first maximising position
  in row-major order;
* truncation ``T_beta`` passes the gradient for outputs in ``[-beta, beta]``
  and blocks it outside.

The exact empirical minimiser is out of reach, so ``train`` runs several
seeded restarts of a first-order method and keeps the best snapshot seen.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .cnn_model import (CnnArchitecture, CnnWeights, FnnArchitecture, FnnWeights, Predictor,
                        cnn_channels, conv_layer, output_region, relu)
from .synth_data import Dataset

OPTIMIZERS = ("gd", "momentum", "adam")
SCHEDULES = ("constant", "cosine", "step")


class TrainingError(RuntimeError):
    """Every restart diverged."""


def phi(z):
    """Logistic loss ``log(1 + exp(-z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, np.log1p(np.exp(-np.abs(z))), -z + np.log1p(np.exp(-np.abs(z))))


def phi_prime(z):
    return -np.exp(-np.logaddexp(0.0, z))


def empirical_xent(predictor, dataset: Dataset) -> float:
    """Mean of ``phi(Y_i f(X_i))``; ``predictor`` maps an image batch to reals."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    f = np.asarray(predictor(dataset.images), dtype=float)
    return float(phi(dataset.labels * f).mean())


# --------------------------------------------------------------------------
# parameters as flat lists


def to_params(cnn: CnnWeights, fnn: FnnWeights) -> list[np.ndarray]:
    return [*cnn.filters, *cnn.biases, cnn.w_out, *fnn.weights, *fnn.biases, fnn.w_out,
            np.array([fnn.b_out], dtype=fnn.w_out.dtype)]


def from_params(params: list[np.ndarray], cnn_arch: CnnArchitecture, fnn_arch: FnnArchitecture):
    L, R = cnn_arch.depth, fnn_arch.depth
    cnn = CnnWeights(list(params[:L]), list(params[L:2 * L]), params[2 * L])
    o = 2 * L + 1
    fnn = FnnWeights(list(params[o:o + R]), list(params[o + R:o + 2 * R]), params[o + 2 * R],
                     float(params[o + 2 * R + 1][0]))
    return cnn, fnn


def init_params(cnn_arch: CnnArchitecture, fnn_arch: FnnArchitecture, rng: np.random.Generator,
                scale: float = 1.0, bias: float = 0.0) -> list[np.ndarray]:
    """Symmetric uniform init, half-width ``scale * sqrt(6 / fan_in)`` (He scaling).

    Hidden biases get a tenth of that width plus the offset ``bias``; a small
    positive offset keeps narrow ReLU layers from starting out dead.
    """
    cnn = CnnWeights.zeros(cnn_arch)
    fnn = FnnWeights.zeros(fnn_arch)
    params = to_params(cnn, fnn)
    L, R = cnn_arch.depth, fnn_arch.depth
    fan = [w.shape[0] * w.shape[1] * w.shape[2] for w in cnn.filters]
    fan += fan
    fan += [cnn_arch.channels[-1]]
    fan += [w.shape[1] for w in fnn.weights] * 2
    fan += [fnn_arch.widths[-1], fnn_arch.widths[-1]]
    out = []
    for i, (p, f) in enumerate(zip(params, fan)):
        half = scale * math.sqrt(6.0 / f)
        if L <= i < 2 * L or 2 * L + 1 + R <= i < 2 * L + 1 + 2 * R:
            out.append(bias + rng.uniform(-0.1 * half, 0.1 * half, size=p.shape))
            continue
        out.append(rng.uniform(-half, half, size=p.shape))
    return out


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class _Cache:
    channels: list
    argmax: np.ndarray
    f: np.ndarray
    hidden: list
    g: np.ndarray


def _forward(cnn_arch, fnn_arch, cnn: CnnWeights, fnn: FnnWeights, images: np.ndarray) -> _Cache:
    o = cnn_channels(cnn, images)
    n1, n2 = output_region(cnn_arch)
    zmap = (o[-1][:, :n1, :n2] @ cnn.w_out).reshape(len(images), -1)
    idx = zmap.argmax(axis=1)
    f = zmap[np.arange(len(images)), idx]
    h = [f[:, None]]
    for w, b in zip(fnn.weights, fnn.biases):
        h.append(relu(h[-1] @ w.T + b))
    g = h[-1] @ fnn.w_out + fnn.b_out
    return _Cache(o, idx, f, h, g)


def _backward(cnn_arch, fnn_arch, cnn: CnnWeights, fnn: FnnWeights, cache: _Cache, dg: np.ndarray):
    """Gradients of ``sum_b dg_b * g_b`` w.r.t. all parameters (params-list order)."""
    h = cache.hidden
    d_wout_f = h[-1].T @ dg
    d_bout_f = np.array([dg.sum()])
    dh = dg[:, None] * fnn.w_out[None, :]
    dW_f, db_f = [None] * len(fnn.weights), [None] * len(fnn.weights)
    for r in range(len(fnn.weights) - 1, -1, -1):
        dpre = dh * (h[r + 1] > 0)
        dW_f[r] = dpre.T @ h[r]
        db_f[r] = dpre.sum(axis=0)
        dh = dpre @ fnn.weights[r]
    df = dh[:, 0]

    o = cache.channels
    bsz, d1, d2, kl = o[-1].shape
    n1, n2 = output_region(cnn_arch)
    bi = np.arange(bsz)
    ii, jj = np.divmod(cache.argmax, n2)
    top = o[-1][bi, ii, jj]                     # (B, k_L)
    d_wout_c = top.T @ df
    do = np.zeros_like(o[-1])
    do[bi, ii, jj] = df[:, None] * cnn.w_out[None, :]
    L = len(cnn.filters)
    dW_c, db_c = [None] * L, [None] * L
    for r in range(L - 1, -1, -1):
        w = cnn.filters[r]
        m, _, cin, cout = w.shape
        dpre = do * (o[r + 1] > 0)
        db_c[r] = dpre.sum(axis=(0, 1, 2))
        xp = np.zeros((bsz, d1 + m - 1, d2 + m - 1, cin), dtype=dpre.dtype)
        xp[:, :d1, :d2] = o[r]
        flat = dpre.reshape(-1, cout)
        gw = np.empty_like(w)
        for t1 in range(m):
            for t2 in range(m):
                gw[t1, t2] = xp[:, t1:t1 + d1, t2:t2 + d2].reshape(-1, cin).T @ flat
        dW_c[r] = gw
        if r > 0:
            dxp = np.zeros_like(xp)
            for t1 in range(m):
                for t2 in range(m):
                    dxp[:, t1:t1 + d1, t2:t2 + d2] += dpre @ w[t1, t2].T
            do = dxp[:, :d1, :d2]
    return [*dW_c, *db_c, d_wout_c, *dW_f, *db_f, d_wout_f, d_bout_f]


def loss_and_grad(cnn_arch, fnn_arch, beta: float, params: list, images: np.ndarray, labels: np.ndarray):
    """Mean logistic loss of the truncated network and its subgradient."""
    cnn, fnn = from_params(params, cnn_arch, fnn_arch)
    cache = _forward(cnn_arch, fnn_arch, cnn, fnn, images)
    out = np.clip(cache.g, -beta, beta)
    y = labels.astype(cache.g.dtype)
    margin = y * out
    loss = float(phi(margin).mean())
    inside = np.abs(cache.g) <= beta
    dg = y * phi_prime(margin) * inside / len(images)
    return loss, _backward(cnn_arch, fnn_arch, cnn, fnn, cache, dg.astype(cache.g.dtype))


def loss_only(cnn_arch, fnn_arch, beta: float, params: list, images: np.ndarray, labels: np.ndarray,
              chunk: int = 8192) -> float:
    cnn, fnn = from_params(params, cnn_arch, fnn_arch)
    total = 0.0
    for i in range(0, len(images), chunk):
        g = _forward(cnn_arch, fnn_arch, cnn, fnn, images[i:i + chunk]).g
        total += float(phi(labels[i:i + chunk] * np.clip(g, -beta, beta)).sum())
    return total / len(images)


def backward(predictor: Predictor, image, label: int):
    """Subgradient of ``phi(label * predictor(image))`` for one sample.

    Returns ``(CnnWeights, FnnWeights)`` holding the gradient.
    """
    x = np.asarray(getattr(image, "pixels", image), dtype=float)[None]
    params = to_params(predictor.cnn, predictor.fnn)
    _, grads = loss_and_grad(predictor.cnn_arch, predictor.fnn_arch, predictor.beta, params, x,
                             np.array([label]))
    return from_params(grads, predictor.cnn_arch, predictor.fnn_arch)


def activation_pattern(cnn_arch, fnn_arch, beta, params, images) -> tuple:
    """Everything that fixes the local linear piece: ReLU masks, argmax, clip region."""
    cnn, fnn = from_params(params, cnn_arch, fnn_arch)
    c = _forward(cnn_arch, fnn_arch, cnn, fnn, images)
    masks = tuple((o > 0).tobytes() for o in c.channels[1:]) + tuple((h > 0).tobytes() for h in c.hidden[1:])
    return masks + (c.argmax.tobytes(), np.sign(np.abs(c.g) - beta).tobytes())


def gradient_check(cnn_arch, fnn_arch, beta, params, images, labels, h: float = 1e-5,
                   tol: float = 1e-4, max_coords: int | None = None, seed: int = 0) -> dict:
    """Central finite differences against backprop, coordinate by coordinate.

    A coordinate counts as a kink when moving it by ``+-h`` changes the
    activation pattern (any ReLU mask, argmax position or clip region) or
    when the two one-sided differences disagree by more than ``1e-6``; those
    coordinates are skipped.  Relative error uses ``max(|a|, |b|, 1e-6)`` as
    the denominator so exactly-zero gradients compare on an absolute scale.
    """
    _, grads = loss_and_grad(cnn_arch, fnn_arch, beta, params, images, labels)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rngmod.stream(seed, rngmod.AUDIT).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    base = activation_pattern(cnn_arch, fnn_arch, beta, params, images)
    errors, kinks, spec_kinks = [], 0, 0
    f0 = loss_only(cnn_arch, fnn_arch, beta, params, images, labels)
    for i, j in coords:
        vals = []
        pats = []
        for step in (h, -h):
            p = [a.copy() for a in params]
            p[i].flat[j] += step
            vals.append(loss_only(cnn_arch, fnn_arch, beta, p, images, labels))
            pats.append(activation_pattern(cnn_arch, fnn_arch, beta, p, images))
        fd = (vals[0] - vals[1]) / (2 * h)
        one_sided = abs((vals[0] - f0) / h - (f0 - vals[1]) / h)
        spec_kinks += one_sided > 1e-6
        if pats[0] != base or pats[1] != base or one_sided > 1e-6:
            kinks += 1
            continue
        bp = float(grads[i].flat[j])
        errors.append(abs(fd - bp) / max(abs(fd), abs(bp), 1e-6))
    errors = np.asarray(errors)
    return {"checked": int(len(errors)), "kinks": int(kinks), "one_sided_disagree": int(spec_kinks),
            "max_rel_error": float(errors.max()) if len(errors) else 0.0,
            "fraction_ok": float((errors < tol).mean()) if len(errors) else 1.0}


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    step_size: float = 0.01
    schedule: str = "cosine"
    epochs: int = 200
    batch_size: int = 0          # 0 = full batch
    steps: int = 0               # > 0 overrides epochs: enough epochs for this many updates
    restarts: int = 2
    init_scale: float = 1.0
    init_bias: float = 0.1
    seed: int = 0
    float32: bool = False
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.restarts < 1 or self.epochs < 1 or self.batch_size < 0 or self.steps < 0:
            raise ValueError("restarts and epochs must be >= 1, batch_size and steps >= 0")


@dataclass
class TrainReport:
    best_loss: float
    chosen_restart: int
    restart_losses: list          # per restart: training loss per epoch (nan-free prefix)
    restart_final: list           # per restart: best-snapshot loss, or None if diverged
    diverged: list
    wall_time: float = 0.0
    gradient_check: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _lr(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.step_size * 0.5 * (1 + math.cos(math.pi * step / total))
    if cfg.schedule == "step":
        return cfg.step_size * 0.5 ** (3 * step // total)
    return cfg.step_size


def _run_restart(cnn_arch, fnn_arch, beta, x, y, cfg: TrainConfig, restart: int):
    g = rngmod.stream(cfg.seed, rngmod.TRAIN, restart)
    dtype = np.float32 if cfg.float32 else np.float64
    params = [p.astype(dtype) for p in init_params(cnn_arch, fnn_arch, g, cfg.init_scale, cfg.init_bias)]
    n = len(x)
    bs = n if cfg.batch_size in (0,) or cfg.batch_size >= n else cfg.batch_size
    full = bs == n
    steps_per_epoch = (n + bs - 1) // bs
    epochs = -(-cfg.steps // steps_per_epoch) if cfg.steps > 0 else cfg.epochs
    total = epochs * steps_per_epoch
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    best, best_params, curve = math.inf, [p.copy() for p in params], []
    step = 0
    for epoch in range(epochs):
        order = np.arange(n) if full else g.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_grad(cnn_arch, fnn_arch, beta, params, x[idx], y[idx])
            if full:
                # loss of the current parameters on the whole sample
                if not np.isfinite(loss):
                    return None, curve
                if loss < best:
                    best, best_params = loss, [p.copy() for p in params]
                curve.append(loss)
            lr = _lr(cfg, step, total)
            step += 1
            for k, (p, d) in enumerate(zip(params, grads)):
                if cfg.optimizer == "gd":
                    p -= lr * d
                elif cfg.optimizer == "momentum":
                    m1[k] = cfg.momentum * m1[k] + d
                    p -= lr * m1[k]
                else:
                    m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * d
                    m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * d * d
                    mh = m1[k] / (1 - cfg.beta1 ** step)
                    vh = m2[k] / (1 - cfg.beta2 ** step)
                    p -= (lr * mh / (np.sqrt(vh) + 1e-8)).astype(p.dtype)
        if not full:
            loss = loss_only(cnn_arch, fnn_arch, beta, params, x, y)
            if not np.isfinite(loss):
                return None, curve
            if loss < best:
                best, best_params = loss, [p.copy() for p in params]
            curve.append(loss)
    final = loss_only(cnn_arch, fnn_arch, beta, params, x, y)
    if np.isfinite(final) and final < best:
        best, best_params = final, [p.copy() for p in params]
    if not np.isfinite(best):
        return None, curve
    return (best, [p.astype(np.float64) for p in best_params]), curve


def train(cnn_arch: CnnArchitecture, fnn_arch: FnnArchitecture, beta: float, dataset: Dataset,
          config: TrainConfig) -> tuple[Predictor, TrainReport]:
    """Multi-restart first-order ERM of the logistic loss.

    Deterministic in ``(config.seed, dataset)``.  Returns the predictor with
    the lowest training loss over all restarts and all epoch snapshots.
    """
    t0 = time.perf_counter()
    dtype = np.float32 if config.float32 else np.float64
    x = dataset.images.astype(dtype)
    y = dataset.labels.astype(dtype)
    best, chosen = None, -1
    curves, finals, diverged = [], [], []
    for r in range(config.restarts):
        res, curve = _run_restart(cnn_arch, fnn_arch, beta, x, y, config, r)
        curves.append([float(v) for v in curve])
        if res is None:
            diverged.append(r)
            finals.append(None)
            continue
        finals.append(float(res[0]))
        if best is None or res[0] < best[0]:
            best, chosen = res, r
    if best is None:
        raise TrainingError(f"all {config.restarts} restarts diverged")
    cnn, fnn = from_params(best[1], cnn_arch, fnn_arch)
    report = TrainReport(float(best[0]), chosen, curves, finals, diverged, time.perf_counter() - t0)
    return Predictor(cnn_arch, fnn_arch, cnn, fnn, beta), report
