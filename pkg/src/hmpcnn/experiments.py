"""Experiment pipelines shared by the command line and the acceptance tests."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .cnn_model import cnn_forward, schedule_from_theorem1
from .constructions import (HatBasis, compile_hmp_to_cnn, compiled_sizes, hierarchical_eval_nets,
                            lemma7_eval_direct, lemma7_eval_network, lemma7_loss_gap, random_node_nets)
from .hmp_model import (HmpModel, affine_node, bayes_classify, block_values, eta as model_eta,
                        lemma8_gap_and_bound, make_model, node_keys, perturb_model)
from .risk_bounds import (RateSweepResult, bayes_scores, calibration_check, fit_rate_slope,
                          margin_phi_bound_check, mc_risks, theorem1_exponent, zhang_check)
from .synth_data import sample_dataset, sample_images, sharpen_margin
from .training import TrainConfig, train


# --------------------------------------------------------------------------
# models


def calibrate_root_bias(model: HmpModel, mc: int = 20000, seed: int = 0, target: float = 0.5) -> HmpModel:
    """Move the bias of an affine root so that the median of eta is ``target``.

    The root is ``clip(w . z + b, 0, 1)`` and both the clip and the max over
    placements are monotone, so the median of eta is ``median(max w . z) + b``.
    """
    root = model.node(model.level, 1)
    if root.family != "affine-clamped":
        raise ValueError("root bias calibration needs an affine-clamped root")
    w = np.asarray(root.params[:4])
    nodes = dict(zip(node_keys(model.level), model.nodes))
    nodes[(model.level, 1)] = lambda z: z @ w
    images, _ = sample_images(model.d1, model.d2, mc, seed, purpose=rngmod.AUDIT)
    raw = block_values(nodes, model.level, images).reshape(mc, -1).max(axis=1)
    return model.with_node(model.level, 1, affine_node(w, target - float(np.median(raw))))


def build_model(spec: dict) -> HmpModel:
    """Model from a config mapping: ``level``, ``family`` (str or dict), ``seed``,
    ``d1``, ``d2``, optional ``calibrate`` (median eta 1/2) and ``gamma`` (sharpening)."""
    fam = spec.get("family", "affine-clamped")
    model = make_model(int(spec.get("level", 1)), fam, int(spec.get("seed", 0)), spec.get("d1"), spec.get("d2"),
                       float(spec.get("smoothness", 1.0)))
    if spec.get("calibrate", False):
        model = calibrate_root_bias(model, int(spec.get("calibrate_mc", 20000)), int(spec.get("seed", 0)))
    if spec.get("gamma"):
        model = sharpen_margin(model, float(spec["gamma"]))
    return model


# --------------------------------------------------------------------------
# rate sweep


@dataclass
class SweepSettings:
    ns: tuple = (256, 512, 1024, 2048, 4096)
    reps: int = 5
    p: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: int = 8
    c5: int = 7
    scale: float = 0.1
    mc: int = 20000
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        optimizer="adam", step_size=0.01, schedule="cosine", batch_size=64, steps=3000, restarts=3, float32=True))


def train_for_n(model: HmpModel, dataset, n: int, st: SweepSettings, train_seed: int):
    sch = schedule_from_theorem1(n, st.p, model.level, model.d1, model.d2, st.c1, st.c2, st.c3, st.c4, st.c5,
                                 st.scale)
    pred, report = train(sch.cnn, sch.fnn, sch.beta, dataset.prefix(n), replace(st.train, seed=train_seed))
    return pred, report, sch


def rate_sweep(model: HmpModel, st: SweepSettings, progress=None) -> RateSweepResult:
    """Excess risks of the trained estimator over an n grid and repetitions.

    Repetition ``r`` draws one dataset of the largest size and trains on its
    prefixes, so the grid points of a repetition are nested.  All fits are
    evaluated on the same Monte Carlo images.
    """
    ns = sorted(int(n) for n in st.ns)
    e01 = np.zeros((len(ns), st.reps))
    ephi, s01, sphi = np.zeros_like(e01), np.zeros_like(e01), np.zeros_like(e01)
    eval_seed = rngmod.derive_seed(st.seed, rngmod.EVAL)
    for r in range(st.reps):
        ds = sample_dataset(model, ns[-1], rngmod.derive_seed(st.seed, rngmod.DATA, r))
        for i, n in enumerate(ns):
            t0 = time.perf_counter()
            pred, report, _ = train_for_n(model, ds, n, st, rngmod.derive_seed(st.seed, rngmod.TRAIN, r, i))
            rr = mc_risks(pred.classify, pred, model, st.mc, eval_seed)
            e01[i, r], ephi[i, r], s01[i, r], sphi[i, r] = rr.excess01, rr.excess_phi, rr.se_excess01, rr.se_excess_phi
            if progress:
                progress(f"rep {r} n {n}: excess01 {rr.excess01:.4f} train loss {report.best_loss:.4f} "
                         f"({time.perf_counter() - t0:.1f}s)")
    meta = {"model_id": model.model_id, "seed": st.seed, "reps": st.reps, "mc": st.mc}
    return RateSweepResult(ns, e01, ephi, s01, sphi, theorem1_exponent(st.p, "a"), st.scale, meta)


# --------------------------------------------------------------------------
# comparison inequalities


def constant_score(value: float):
    return lambda x: np.full(len(np.asarray(x)), float(value))


def lemma1_suite(models: dict, n_train: int, mc: int, seed: int, st: SweepSettings | None = None,
                 constants=(1 / math.sqrt(2),)) -> list[dict]:
    """Both comparison inequalities for Bayes, constant, zero and trained scores.

    ``models`` maps a name to a model.  Each row carries the risk report, the
    square-root check for every constant in ``constants`` and the
    calibration check.
    """
    st = st or SweepSettings()
    rows = []
    for mi, (name, model) in enumerate(models.items()):
        fstar = bayes_scores(model)
        ds = sample_dataset(model, n_train, rngmod.derive_seed(seed, rngmod.DATA, mi))
        pred, _, _ = train_for_n(model, ds, n_train, st, rngmod.derive_seed(seed, rngmod.TRAIN, mi))
        cands = {
            "bayes": (lambda x, m=model: bayes_classify(model_eta(m, x)), fstar),
            "constant": (lambda x: np.ones(len(x), dtype=int), constant_score(1.0)),
            "zero": (lambda x: np.ones(len(x), dtype=int), constant_score(0.0)),
            "cnn": (pred.classify, pred),
        }
        for cname, (cls, score) in cands.items():
            rep = mc_risks(cls, score, model, mc, rngmod.derive_seed(seed, rngmod.EVAL, mi))
            row = {"model": name, "classifier": cname, "report": rep, "calibration": calibration_check(rep)}
            row["sqrt"] = {c: zhang_check(rep, c) for c in constants}
            rows.append(row)
    return rows


def c8_oracle(model: HmpModel, gamma: float, F: float, N: int, seed: int) -> dict:
    """Brute-force reference for the margin entropy bound, computed without the
    shipped check: hypothesis probability and mean binary entropy on ``N`` images."""
    sharp = sharpen_margin(model, gamma)
    images, _ = sample_images(model.d1, model.d2, N, seed, purpose=rngmod.AUDIT)
    e = model_eta(sharp, images)
    e = np.clip(e, 1e-300, np.nextafter(1.0, 0.0))
    lg = np.log(e) - np.log1p(-e)
    hyp = float(np.mean(np.abs(lg) > F))
    ent = -(e * np.log(e) + (1 - e) * np.log1p(-e))
    return {"gamma": gamma, "F": F, "hypothesis_prob": hyp, "needed": 1 - math.exp(-F),
            "measured": float(ent.mean()), "se": float(ent.std(ddof=1) / math.sqrt(N)),
            "ratio_needed": float(ent.mean() / (F * math.exp(-F)))}


def c8_sweep(model: HmpModel, gammas=(2, 4, 8), Fs=(1, 2, 3), N: int = 20000, seed: int = 0,
             c8: float = 4.0) -> list[dict]:
    """Oracle rows plus the shipped check on the same (gamma, F) grid."""
    rows = []
    for g in gammas:
        sharp = sharpen_margin(model, g)
        for F in Fs:
            o = c8_oracle(model, g, F, N, seed)
            chk = margin_phi_bound_check(sharp, F, N, seed, c8)
            o["hypothesis_holds"] = o["hypothesis_prob"] >= o["needed"]
            o["c8_dominates"] = (not o["hypothesis_holds"]) or o["measured"] <= c8 * F * math.exp(-F) + 3 * o["se"]
            o["check"] = chk
            rows.append(o)
    return rows


# --------------------------------------------------------------------------
# constructions


def lemma7_report(K: int, points: int = 10_000) -> dict:
    basis = HatBasis.logit(K)
    z = np.linspace(-1.0, 2.0, points)
    net = lemma7_eval_network(basis, z)
    direct = lemma7_eval_direct(basis, z)
    knots = np.arange(1, K) / K
    interp = np.abs(lemma7_eval_network(basis, knots) - np.log(knots / (1 - knots))).max()
    edge = max(abs(lemma7_eval_network(basis, -2.0 / K)), abs(lemma7_eval_network(basis, 1 + 2.0 / K)))
    return {"K": K, "max_deviation": float(np.abs(net - direct).max()), "knot_error": float(interp),
            "edge_value": float(edge), "sup_abs": float(np.abs(net).max()), "bound": math.log(K + 1)}


def lemma7_gap_sweep(Ks=(6, 12, 24, 48), points: int = 200_001) -> dict:
    """Sup loss gap with exact ``g_bar = eta`` on a grid of eta values in [0, 1]."""
    eta = np.linspace(0.0, 1.0, points)
    gaps = np.array([lemma7_loss_gap(eta, eta, K) for K in Ks])
    rate = np.array([math.log(K) / K for K in Ks])
    slope = float(np.polyfit(np.log(rate), np.log(gaps), 1)[0])
    consts = gaps / rate
    return {"K": list(Ks), "gap": gaps.tolist(), "rate": rate.tolist(), "slope": slope,
            "constants": consts.tolist(), "spread": float(consts.max() / consts.min()),
            "slope_vs_inverse_K": float(np.polyfit(np.log(1.0 / np.asarray(Ks)), np.log(gaps), 1)[0])}


def lemma8_trials(count: int, levels=(1, 2), seed: int = 0) -> list[dict]:
    """Random (model, perturbation, image) triples with affine nodes (exact sup distances)."""
    g = rngmod.stream(seed, rngmod.AUDIT, 8)
    rows = []
    for t in range(count):
        level = levels[t % len(levels)]
        d = int(g.integers(2 ** level, 9))
        fam = {"family": "affine-clamped", "gain": float(g.uniform(0.2, 3.0)), "signed": bool(g.random() < 0.5),
               "bias_range": (-0.5, 0.5)}
        model = make_model(level, fam, int(g.integers(0, 2 ** 31)), d, d)
        mode = "shift" if g.random() < 0.5 else "bias"
        delta = g.uniform(-0.3, 0.3, size=len(model.nodes))
        pert = perturb_model(model, delta, mode)
        image = g.random((d, d))
        res = lemma8_gap_and_bound(model, pert, image)
        res.update(level=level, d=d, mode=mode)
        rows.append(res)
    return rows


def compile_check(level: int, d: int, L_net: int, r_net: int, images: int = 1000, seed: int = 0) -> dict:
    nets = random_node_nets(level, L_net, r_net, seed)
    arch, w = compile_hmp_to_cnn(nets, level, d, d)
    x, _ = sample_images(d, d, images, seed, purpose=rngmod.AUDIT)
    dev = float(np.abs(cnn_forward(arch, w, x) - hierarchical_eval_nets(nets, level, x)).max())
    layers, channels, filters = compiled_sizes(level, L_net, r_net)
    sizes_ok = (arch.depth == layers and set(arch.channels) == {channels} and arch.filter_sizes == filters)
    return {"level": level, "d": d, "L_net": L_net, "r_net": r_net, "max_deviation": dev,
            "layers": arch.depth, "channels": arch.channels[0], "filter_sizes": list(arch.filter_sizes),
            "sizes_ok": bool(sizes_ok)}
