import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmpcnn import hmp_model as hm


def tree_value(model, x, k, s, i, j):
    """Plain recursion over the quadrant definition (independent of block_values)."""
    g = model.node(k, s)
    if k == 1:
        args = [x[i, j], x[i, j + 1], x[i + 1, j], x[i + 1, j + 1]]
    else:
        h = 2 ** (k - 1)
        c = 4 * (s - 1)
        args = [tree_value(model, x, k - 1, c + 1, i, j), tree_value(model, x, k - 1, c + 2, i + h, j),
                tree_value(model, x, k - 1, c + 3, i, j + h), tree_value(model, x, k - 1, c + 4, i + h, j + h)]
    return float(g(np.array(args)))


def brute_max_pool(model, x):
    w = model.window
    return max(tree_value(model, x, model.level, 1, i, j)
               for i in range(x.shape[0] - w + 1) for j in range(x.shape[1] - w + 1))


FAMILIES = ["affine-clamped", "soft-max-blend", "radial-bump-mixture"]


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("level", [1, 2, 3])
def test_block_values_match_recursion(family, level):
    d = 2 ** level + 2
    model = hm.make_model(level, family, seed=11, d1=d, d2=d + 1)
    x = np.random.default_rng(0).random((3, d, d + 1))
    got = hm.eval_max_pool(model, x)
    for b in range(3):
        assert got[b] == pytest.approx(brute_max_pool(model, x[b]), abs=1e-13)


def test_leaf_argument_order():
    # level 1 reads (x11, x12, x21, x22); a one-hot weight picks one pixel
    patch = np.array([[0.1, 0.2], [0.3, 0.4]])
    for q, want in enumerate([0.1, 0.2, 0.3, 0.4]):
        w = np.zeros(4)
        w[q] = 1.0
        m = hm.HmpModel(1, (hm.affine_node(w, 0.0),), 2, 2)
        assert hm.eval_hierarchical(m, patch) == pytest.approx(want)


def test_level2_quadrant_order():
    # root picks its second argument: the child at offset (2, 0), i.e. the lower-left quadrant
    x = np.arange(16, dtype=float).reshape(4, 4) / 16
    leaves = tuple(hm.affine_node((1, 0, 0, 0), 0.0) for _ in range(4))
    m = hm.HmpModel(2, leaves + (hm.affine_node((0, 1, 0, 0), 0.0),), 4, 4)
    assert hm.eval_hierarchical(m, x) == pytest.approx(x[2, 0])


def test_constant_model_is_constant():
    m = hm.HmpModel(1, (hm.constant_node(0.75),), 8, 8)
    x = np.random.default_rng(1).random((50, 8, 8))
    assert np.all(hm.eta(m, x) == 0.75)


def test_window_too_large_and_bad_pixels():
    with pytest.raises(hm.ModelError):
        hm.make_model(2, "affine-clamped", 0, d1=3, d2=8)
    m = hm.make_model(1, "affine-clamped", 0, d1=4, d2=4)
    with pytest.raises(hm.ModelError):
        hm.eval_max_pool(m, np.ones((1, 1)))
    with pytest.raises(hm.ModelError):
        hm.ImageGrid(np.array([[0.5, np.nan]]))
    with pytest.raises(hm.ModelError):
        hm.ImageGrid(np.array([[1.5]]))
    with pytest.raises(hm.ModelError):
        hm.eval_max_pool(m, np.full((4, 4), np.nan))


def test_image_grid_is_read_only():
    img = hm.ImageGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0


@pytest.mark.parametrize("family", FAMILIES)
def test_certified_lipschitz_dominates_sampled_slopes(family):
    m = hm.make_model(2, family, seed=5)
    for node in m.nodes:
        assert hm.lipschitz_audit(node, 2000, seed=1, box=(-2.0, 2.0)) <= node.lipschitz + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(FAMILIES))
def test_nodes_map_unit_cube_into_unit_interval(seed, family):
    m = hm.make_model(1, family, seed=seed)
    z = np.random.default_rng(seed).random((200, 4))
    v = m.nodes[0](z)
    assert np.all((v >= 0) & (v <= 1))


def test_sharpened_lipschitz_and_fixed_point():
    base = hm.softmax_blend_node(0.1, 0.5, 0.1, 0.8)
    s = hm.sharpen_node(base, 8.0)
    assert s.lipschitz == pytest.approx(8 * base.lipschitz)
    assert hm.lipschitz_audit(s, 4000, seed=3) <= s.lipschitz + 1e-9


def test_serialization_round_trip():
    m = hm.make_model(2, "radial-bump-mixture", seed=9, d1=6, d2=7)
    back = hm.HmpModel.loads(m.dumps())
    assert back.model_id == m.model_id
    x = np.random.default_rng(2).random((5, 6, 7))
    np.testing.assert_array_equal(hm.eta(back, x), hm.eta(m, x))
    doc = json.loads(m.dumps())
    doc["version"] = 99
    with pytest.raises(hm.ModelError):
        hm.HmpModel.from_dict(doc)


def test_make_model_deterministic():
    a = hm.make_model(2, "soft-max-blend", seed=42)
    b = hm.make_model(2, "soft-max-blend", seed=42)
    c = hm.make_model(2, "soft-max-blend", seed=43)
    assert a.model_id == b.model_id != c.model_id


def test_scalar_helpers():
    assert hm.bayes_classify(0.5) == 1
    assert hm.bayes_classify(0.4999) == -1
    assert hm.logit(0.0) == -40.0 and hm.logit(1.0) == 40.0
    assert hm.logit(0.5) == 0.0
    assert hm.binary_entropy(0.0) == 0.0 == hm.binary_entropy(1.0)
    assert hm.binary_entropy(0.5) == pytest.approx(math.log(2))
    with pytest.raises(hm.ModelError):
        hm.logit(0.3, clamp_magnitude=0.0)


def test_affine_shift_sup_matches_dense_scan():
    g = hm.affine_node((0.3, -0.2, 0.1, 0.4), 0.35)
    for delta in (-0.7, -0.2, 0.05, 0.6):
        h = hm.affine_node(g.params[:4], g.params[4] + delta)
        value, exact = hm.node_sup_distance(g, h)
        span = 2 * sum(abs(v) for v in g.params[:4])
        u = np.linspace(g.params[4] - span, g.params[4] + span, 200001)
        brute = np.abs(np.clip(u, 0, 1) - np.clip(u + delta, 0, 1)).max()
        assert exact and value == pytest.approx(brute, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.sampled_from(["shift", "bias"]),
       st.floats(-0.5, 0.5))
def test_perturbation_bound_holds(seed, level, mode, delta):
    m = hm.make_model(level, {"family": "affine-clamped", "gain": 2.0, "signed": True}, seed=seed, d1=6, d2=6)
    p = hm.perturb_model(m, delta, mode)
    x = np.random.default_rng(seed).random((4, 6, 6))
    r = hm.lemma8_gap_and_bound(m, p, x)
    assert r["exact"]
    assert np.all(r["gap"] <= r["bound"] + 1e-9)


def test_perturb_model_rejects_bad_input():
    m = hm.make_model(1, "soft-max-blend", seed=0)
    with pytest.raises(hm.ModelError):
        hm.perturb_model(m, 0.1, "bias")
    with pytest.raises(hm.ModelError):
        hm.perturb_model(m, 1.5, "shift")
