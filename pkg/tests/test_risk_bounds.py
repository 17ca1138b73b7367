import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmpcnn import hmp_model as hm
from hmpcnn import risk_bounds as rb
from hmpcnn import rng


def const_model(v, d=4):
    return hm.HmpModel(1, (hm.constant_node(v),), d, d)


def plus_one(x):
    return np.ones(len(x), dtype=int)


def zero_score(x):
    return np.zeros(len(x))


def test_bayes_rule_has_zero_excess():
    m = hm.make_model(1, "soft-max-blend", seed=4, d1=6, d2=6)
    r = rb.mc_risks(lambda x: hm.bayes_classify(hm.eta(m, x)), rb.bayes_scores(m), m, 3000, seed=1)
    assert r.excess01 == 0.0 and r.se_excess01 == 0.0
    assert r.excess_phi >= -1e-12


def test_constant_models_exact():
    r = rb.mc_risks(plus_one, None, const_model(1.0), 100, seed=0)
    assert r.r01 == 0.0 and r.r_star == 0.0
    r = rb.mc_risks(lambda x: -plus_one(x), zero_score, const_model(0.5), 100, seed=0)
    assert r.r01 == 0.5 and r.r_star == 0.5 and r.se01 == 0.0
    assert r.r_phi == pytest.approx(math.log(2))


def test_zero_function_on_three_quarter_model():
    r = rb.mc_risks(plus_one, zero_score, const_model(0.75), 200, seed=0)
    ent = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert r.excess01 == 0.0
    assert r.excess_phi == pytest.approx(math.log(2) - ent, abs=1e-12)
    z = rb.zhang_check(r)
    assert z.rhs == pytest.approx(math.sqrt(math.log(2) - ent) / math.sqrt(2))
    assert z.status == "pass"
    c = rb.calibration_check(r)
    assert c.rhs == pytest.approx(2 * (math.log(2) - ent) + 4 * ent)
    assert c.status == "pass"


def test_stated_square_root_constant_counterexample():
    # eta = 1/4 everywhere, classifier +1 from the zero score:
    # excess01 = 1/2 but sqrt(excess_phi)/sqrt(2) = 0.256; the sqrt(2) form holds
    r = rb.mc_risks(plus_one, zero_score, const_model(0.25), 50, seed=0)
    assert r.excess01 == pytest.approx(0.5)
    assert rb.zhang_check(r).status == "fail"
    assert rb.zhang_check(r, math.sqrt(2)).status == "pass"
    assert rb.calibration_check(r).status == "pass"


def test_calibration_on_certain_model_reduces():
    r = rb.mc_risks(lambda x: -plus_one(x), lambda x: np.full(len(x), -2.0), const_model(1.0), 50, seed=0)
    assert r.r_phi_star == 0.0
    c = rb.calibration_check(r)
    assert c.rhs == pytest.approx(2 * r.excess_phi)
    assert c.lhs == 1.0 and c.status == "pass"


def test_margin_check_statuses():
    ones = rb.margin_phi_bound_check(const_model(1.0), 2.0, 500, seed=0)
    assert ones.status == "pass" and ones.lhs == 0.0
    half = rb.margin_phi_bound_check(const_model(0.5), 1.0, 500, seed=0)
    assert half.status == "vacuous"
    with pytest.raises(ValueError):
        rb.margin_phi_bound_check(const_model(0.5), 0.0, 10, seed=0)


def test_covering_bound_properties():
    args = dict(L1=4, L2=3, d1=8, d2=8, c1=1.0, c10=1.0, n=4096)
    a = rb.covering_bound(0.1, **args)
    assert a == rb.covering_bound(0.1, **args)
    assert rb.covering_bound(0.05, **args) > a
    doubled = rb.covering_bound(0.1, **{**args, "L1": 8})
    assert doubled > 4 * a
    limit = rb.log_cover_formula(math.log(4096), 4, 8, 8, 1.0, 1.0, 4096)
    assert limit == pytest.approx(0.0, abs=1e-12)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            rb.covering_bound(bad, **args)
    with pytest.raises(ValueError):
        rb.covering_bound(0.1, **{**args, "n": 3})


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 0.99), st.floats(1e-3, 0.99), st.integers(1, 20), st.integers(1, 20))
def test_covering_bound_monotone(e1, e2, l1, l2):
    lo, hi = sorted((e1, e2))
    base = dict(d1=8, d2=8, c1=1.0, c10=1.0, n=4096)
    assert rb.covering_bound(lo, l1, 1, **base) >= rb.covering_bound(hi, l1, 1, **base)
    a, b = sorted((l1, l2))
    assert rb.covering_bound(lo, a, 1, **base) <= rb.covering_bound(lo, b, 1, **base)


def test_empirical_cover_trivial_cases():
    x = np.linspace(0, 1, 20)
    single = lambda g: (lambda t: np.sin(t))
    assert rb.empirical_cover(single, x, [1e-6, 0.5], budget=10, seed=0) == [1, 1]
    lines = lambda g: (lambda t, a=g.uniform(-1, 1): a * t)
    assert rb.empirical_cover(lines, x, 10.0, budget=30, seed=0) == 1
    with pytest.raises(ValueError):
        rb.empirical_cover(lines, x, 0.1, budget=0, seed=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_empirical_cover_monotone_in_eps(seed):
    x = np.linspace(0, 1, 16)
    fam = lambda g: (lambda t, a=g.normal(size=3): a[0] + a[1] * t + a[2] * t * t)
    eps = [2.0 ** -k for k in range(8)]
    counts = rb.empirical_cover(fam, x, eps, budget=40, seed=seed)
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_cover_radii_nonincreasing():
    v = np.random.default_rng(0).normal(size=(50, 10))
    r = rb.cover_radii(v)
    assert r[0] == np.inf and np.all(np.diff(r[1:]) <= 1e-15)


def test_theorem1_exponent():
    assert rb.theorem1_exponent(1, "a") == pytest.approx(1 / 12)
    assert rb.theorem1_exponent(2, "a") == pytest.approx(1 / 8)
    assert rb.theorem1_exponent(2, "b") == pytest.approx(1 / 4)
    assert rb.theorem1_exponent(10, "a") == 1 / 8
    with pytest.raises(ValueError):
        rb.theorem1_exponent(0.5)
    with pytest.raises(ValueError):
        rb.theorem1_exponent(1, "c")


def sweep_from(values):
    ns = [256, 512, 1024, 2048, 4096]
    v = np.asarray(values, dtype=float)
    z = np.zeros_like(v)
    return rb.RateSweepResult(ns, v, v, z, z, 1 / 8, 1.0)


def test_fit_exact_power_law():
    ns = np.array([256, 512, 1024, 2048, 4096], dtype=float)
    fit = rb.fit_rate_slope(sweep_from(np.repeat((ns ** -0.125)[:, None], 3, axis=1)), n_boot=200)
    assert fit["slope"] == pytest.approx(-0.125, abs=1e-12)
    assert fit["ci"][0] == pytest.approx(-0.125, abs=1e-12)


def test_fit_noisy_power_law():
    ns = np.array([256, 512, 1024, 2048, 4096], dtype=float)
    g = rng.stream(1, rng.AUDIT)
    vals = 0.3 * ns[:, None] ** (-1 / 12) * (1 + 0.05 * g.standard_normal((5, 5)))
    fit = rb.fit_rate_slope(sweep_from(vals), n_boot=500)
    assert abs(fit["slope"] + 1 / 12) < 0.03


def test_fit_constant_and_excluded_points():
    fit = rb.fit_rate_slope(sweep_from(np.full((5, 3), 0.1)), n_boot=50)
    assert fit["slope"] == pytest.approx(0.0, abs=1e-12)
    vals = np.full((5, 3), 0.1)
    vals[2] = -0.01
    fit = rb.fit_rate_slope(sweep_from(vals), n_boot=50)
    assert fit["excluded"] == [1024]
    with pytest.raises(ValueError):
        rb.RateSweepResult([4, 2, 8], np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)), 0.1, 1.0)


def test_report_invariants_on_random_scores():
    m = hm.make_model(1, "affine-clamped", seed=1, d1=5, d2=5)
    g = np.random.default_rng(0)
    r = rb.mc_risks(lambda x: np.where(g.random(len(x)) < 0.5, 1, -1), lambda x: np.zeros(len(x)), m, 4000, seed=2)
    assert 0 <= r.r01 <= 1
    assert r.r01 >= r.r_star - 3 * r.se01
    assert r.r_phi >= r.r_phi_star - 3 * r.se_phi
