"""Risk evaluation against a known aposteriori probability, and bound checks.

All risks are computed with the label integrated out analytically: for an
image ``x`` with ``eta = eta(x)`` the conditional 0/1 risk of a decision
``c`` is ``eta * 1{c = -1} + (1 - eta) * 1{c = +1}`` and the conditional
logistic risk of a score ``f`` is ``eta phi(f) + (1 - eta) phi(-f)``.  Only
the images are Monte Carlo draws, so a model with constant ``eta`` gives
exact (zero standard error) answers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .hmp_model import HmpModel, binary_entropy, eta as model_eta, logit
from .synth_data import margin_condition_estimate, sample_images

DEFAULT_C8 = 4.0


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    n = len(v)
    m = float(v.mean())
    if n < 2:
        return m, 0.0
    return m, float(v.std(ddof=1) / math.sqrt(n))


@dataclass
class RiskReport:
    r01: float
    r_star: float
    excess01: float
    r_phi: float
    r_phi_star: float
    excess_phi: float
    n_mc: int
    se01: float
    se_star: float
    se_excess01: float
    se_phi: float
    se_phi_star: float
    se_excess_phi: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def risk_integrands(eta: np.ndarray, decisions: np.ndarray, scores: np.ndarray | None) -> dict:
    eta = np.asarray(eta, dtype=float)
    c = np.asarray(decisions)
    out = {"r01": np.where(c == 1, 1 - eta, eta), "r_star": np.minimum(eta, 1 - eta),
           "r_phi_star": binary_entropy(eta)}
    if scores is not None:
        f = np.asarray(scores, dtype=float)
        out["r_phi"] = eta * np.logaddexp(0.0, -f) + (1 - eta) * np.logaddexp(0.0, f)
    return out


def mc_risks(classify: Callable, score: Callable | None, model: HmpModel, N: int, seed: int,
             chunk: int = 8192, law: str = "uniform") -> RiskReport:
    """Monte Carlo risks of a classifier (``images -> {-1, +1}``) and a score
    function (``images -> reals``) on fresh images from the evaluation stream.

    ``score=None`` skips the logistic risk (reported as nan).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    images, _ = sample_images(model.d1, model.d2, N, seed, purpose=rngmod.EVAL, law=law)
    parts: dict[str, list] = {}
    for i in range(0, N, chunk):
        x = images[i:i + chunk]
        e = model_eta(model, x)
        f = None if score is None else np.asarray(score(x), dtype=float)
        for k, v in risk_integrands(e, np.asarray(classify(x)), f).items():
            parts.setdefault(k, []).append(v)
    v = {k: np.concatenate(p) for k, p in parts.items()}
    r01, se01 = _mean_se(v["r01"])
    rs, se_s = _mean_se(v["r_star"])
    ex01, se_ex01 = _mean_se(v["r01"] - v["r_star"])
    rps, se_ps = _mean_se(v["r_phi_star"])
    if "r_phi" in v:
        rp, se_p = _mean_se(v["r_phi"])
        exp_, se_exp = _mean_se(v["r_phi"] - v["r_phi_star"])
    else:
        rp = se_p = exp_ = se_exp = float("nan")
    return RiskReport(r01, rs, ex01, rp, rps, exp_, N, se01, se_s, se_ex01, se_p, se_ps, se_exp, int(seed))


def bayes_scores(model: HmpModel, clamp: float = 40.0) -> Callable:
    """The logistic-risk minimiser ``log(eta / (1 - eta))`` (clamped)."""
    return lambda x: logit(model_eta(model, x), clamp)


# --------------------------------------------------------------------------
# comparison inequalities


@dataclass
class CheckResult:
    lhs: float
    rhs: float
    slack: float
    stderr: float
    status: str            # "pass", "fail" or "vacuous"
    detail: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.status != "fail"

    def to_dict(self) -> dict:
        return asdict(self)


def _status(slack: float, stderr: float) -> str:
    return "pass" if slack >= -3 * stderr else "fail"


def zhang_check(report: RiskReport, constant: float = 1 / math.sqrt(2)) -> CheckResult:
    """``excess01 <= constant * sqrt(excess_phi)``.

    The stated constant is ``1/sqrt(2)``; the classical comparison theorem
    for the logistic loss gives ``sqrt(2)``, so ``constant`` is exposed.
    The standard error propagates both excess estimates to first order,
    with a one-sided difference so that a zero excess stays finite.
    """
    e01, ephi = report.excess01, report.excess_phi
    if not (math.isfinite(e01) and math.isfinite(ephi)):
        raise ValueError("report has non-finite excess risks")
    rhs = constant * math.sqrt(ephi) if ephi >= 0 else 0.0
    rhs_up = constant * math.sqrt(max(ephi + report.se_excess_phi, 0.0))
    se = report.se_excess01 + abs(rhs_up - rhs)
    return CheckResult(e01, rhs, rhs - e01, se, _status(rhs - e01, se), {"constant": constant})


def calibration_check(report: RiskReport, phi_star_risk: float | None = None,
                      phi_star_se: float | None = None) -> CheckResult:
    """``excess01 <= 2 excess_phi + 4 E phi(Y f*(X))``.

    ``E phi(Y f*(X))`` equals the expected binary entropy of eta, which the
    report already carries; pass ``phi_star_risk`` to override it.
    """
    ps = report.r_phi_star if phi_star_risk is None else phi_star_risk
    ps_se = report.se_phi_star if phi_star_se is None else phi_star_se
    rhs = 2 * report.excess_phi + 4 * ps
    se = report.se_excess01 + 2 * report.se_excess_phi + 4 * ps_se
    slack = rhs - report.excess01
    return CheckResult(report.excess01, rhs, slack, se, _status(slack, se))


def margin_phi_bound_check(model: HmpModel, F: float, N: int, seed: int, c8: float = DEFAULT_C8) -> CheckResult:
    """``E phi(Y f*(X)) <= c8 F exp(-F)`` when ``P{|f*(X)| > F} >= 1 - exp(-F)``.

    The hypothesis is estimated on the evaluation stream first; when the
    point estimate falls short the check is reported as vacuous.
    """
    if F <= 0:
        raise ValueError("F must be > 0")
    p, p_se = margin_condition_estimate(model, 1, N, seed, threshold=F)
    need = 1 - math.exp(-F)
    bound = c8 * F * math.exp(-F)
    images, _ = sample_images(model.d1, model.d2, N, seed, purpose=rngmod.EVAL)
    measured, se = _mean_se(binary_entropy(model_eta(model, images)))
    detail = {"hypothesis_prob": p, "hypothesis_se": p_se, "hypothesis_needed": need, "F": F, "c8": c8}
    if p < need:
        return CheckResult(measured, bound, bound - measured, se, "vacuous", detail)
    return CheckResult(measured, bound, bound - measured, se, _status(bound - measured, se), detail)


# --------------------------------------------------------------------------
# covering numbers


def log_cover_formula(eps: float, L_max: float, d1: int, d2: int, c1: float, c10: float, n: int) -> float:
    """``c10 L_max^2 log(L_max d1 d2) log(c1 log(n) / eps)`` without range checks."""
    return c10 * L_max ** 2 * math.log(L_max * d1 * d2) * math.log(c1 * math.log(n) / eps)


def covering_bound(eps: float, L1: int, L2: int, d1: int, d2: int, c1: float, c10: float, n: int) -> float:
    """Upper bound on the log empirical-L1 covering number of the truncated class."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if c1 * math.log(n) < 2:
        raise ValueError("need c1 * log(n) >= 2")
    if d1 * d2 <= 1:
        raise ValueError("need d1 * d2 > 1")
    return log_cover_formula(eps, max(L1, L2), d1, d2, c1, c10, n)


def cover_radii(values: np.ndarray) -> np.ndarray:
    """Farthest-first traversal under the mean absolute distance.

    ``values`` is ``(m, n)``: ``m`` functions evaluated at ``n`` points.  Entry
    ``k`` of the result is the distance of the ``k``-th chosen function to the
    earlier ones (entry 0 is ``inf``); the sequence is nonincreasing.
    """
    v = np.asarray(values, dtype=float)
    m = len(v)
    dist = np.full(m, np.inf)
    radii = np.empty(m)
    cur = 0
    for k in range(m):
        radii[k] = dist[cur]
        dist = np.minimum(dist, np.abs(v - v[cur]).mean(axis=1))
        dist[cur] = -1.0
        cur = int(dist.argmax())
    radii[0] = np.inf
    return radii


def empirical_cover(sampler: Callable, x, eps, budget: int, seed: int):
    """Greedy (farthest-first) cover size of ``budget`` sampled functions.

    ``sampler(rng)`` returns a function; all sampled functions are evaluated
    on the points ``x``.  The count for radius ``eps`` is the number of
    centres chosen before every sampled function lies within ``eps``.  This
    is a diagnostic of the sample, not a bound on the class.  ``eps`` may be
    a sequence; the counts are then nonincreasing in ``eps`` by construction.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    g = rngmod.stream(seed, rngmod.COVER)
    values = np.stack([np.asarray(sampler(g)(x), dtype=float).ravel() for _ in range(budget)])
    radii = cover_radii(values)
    counts = [1 + int((radii[1:] > e).sum()) for e in np.atleast_1d(eps)]
    return counts[0] if np.ndim(eps) == 0 else counts


# --------------------------------------------------------------------------
# rates


def theorem1_exponent(p: float, variant: str = "a") -> float:
    """Rate exponent: ``min(p/(4p+8), 1/8)`` (general) or ``min(p/(2p+4), 1/4)`` (margin)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if variant == "a":
        return min(p / (4 * p + 8), 1 / 8)
    if variant == "b":
        return min(p / (2 * p + 4), 1 / 4)
    raise ValueError("variant must be 'a' or 'b'")


@dataclass
class RateSweepResult:
    ns: list
    excess01: np.ndarray           # (len(ns), reps)
    excess_phi: np.ndarray
    se01: np.ndarray
    se_phi: np.ndarray
    exponent: float
    scale: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.excess01 = np.asarray(self.excess01, dtype=float)
        self.excess_phi = np.asarray(self.excess_phi, dtype=float)
        self.se01 = np.asarray(self.se01, dtype=float)
        self.se_phi = np.asarray(self.se_phi, dtype=float)
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValueError("n grid must be strictly increasing")

    @property
    def mean01(self) -> np.ndarray:
        return self.excess01.mean(axis=1)

    @property
    def mean_phi(self) -> np.ndarray:
        return self.excess_phi.mean(axis=1)

    def stderr01(self) -> np.ndarray:
        """Standard error of the per-n mean: rep spread plus Monte Carlo error."""
        reps = self.excess01.shape[1]
        spread = self.excess01.std(axis=1, ddof=1) / math.sqrt(reps) if reps > 1 else 0.0
        mc = np.sqrt((self.se01 ** 2).sum(axis=1)) / reps
        return np.sqrt(spread ** 2 + mc ** 2)

    def to_rows(self) -> list[dict]:
        rows = []
        for i, n in enumerate(self.ns):
            for r in range(self.excess01.shape[1]):
                rows.append({"n": n, "rep": r, "excess01": self.excess01[i, r],
                             "excessphi": self.excess_phi[i, r], "stderr01": self.se01[i, r],
                             "stderrphi": self.se_phi[i, r]})
        return rows


def _slope(logn: np.ndarray, logy: np.ndarray) -> float:
    return float(np.polyfit(logn, logy, 1)[0])


def fit_rate_slope(sweep: RateSweepResult, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> dict:
    """Least-squares slope of ``log(mean excess01)`` against ``log n``.

    Grid points with nonpositive mean are dropped and listed in ``excluded``.
    The confidence interval is a percentile bootstrap that resamples the
    repetitions (jointly across the grid).
    """
    if len(sweep.ns) < 3:
        raise ValueError("need at least 3 grid points")
    ns = np.asarray(sweep.ns, dtype=float)
    mean = sweep.mean01
    keep = mean > 0
    if keep.sum() < 2:
        raise ValueError("fewer than 2 grid points with positive excess")
    slope = _slope(np.log(ns[keep]), np.log(mean[keep]))
    reps = sweep.excess01.shape[1]
    g = rngmod.stream(seed, rngmod.BOOTSTRAP)
    boots = []
    for _ in range(n_boot):
        m = sweep.excess01[:, g.integers(0, reps, size=reps)].mean(axis=1)
        ok = m > 0
        if ok.sum() >= 2:
            boots.append(_slope(np.log(ns[ok]), np.log(m[ok])))
    a = (1 - level) / 2
    lo, hi = (np.quantile(boots, [a, 1 - a]) if boots else (np.nan, np.nan))
    return {"slope": slope, "ci": (float(lo), float(hi)), "excluded": [int(n) for n in ns[~keep]],
            "exponent": sweep.exponent, "n_boot": len(boots)}
