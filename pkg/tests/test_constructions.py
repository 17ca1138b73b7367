import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmpcnn import cnn_model as cm
from hmpcnn import constructions as cs


@pytest.mark.parametrize("K", [6, 7, 12])
def test_hat_forms_agree(K):
    z = np.linspace(-0.5, 1.5, 20001)
    for k in range(-1, K + 2):
        np.testing.assert_allclose(cs.hat(z, k, K), cs.hat_relu(z, k, K), atol=1e-12, rtol=0)


def test_hat_values():
    K = 8
    assert cs.hat(3 / K, 3, K) == 1.0
    assert cs.hat(5 / K, 3, K) == 0.0
    assert cs.hat(7 / (2 * K), 3, K) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cs.hat(0.1, K + 2, K)


@pytest.mark.parametrize("K", [6, 9, 24])
def test_basis_invariants(K):
    b = cs.HatBasis.logit(K)
    a = np.array(b.knots)
    assert np.all(np.diff(a) >= 0)
    assert np.abs(a).max() <= math.log(K - 1) + 1e-12
    assert b.a(-1) == b.a(0) == b.a(1) == pytest.approx(-math.log(K - 1))
    with pytest.raises(ValueError):
        cs.HatBasis.logit(5)


def test_direct_form_examples():
    K = 10
    b = cs.HatBasis.logit(K)
    assert cs.lemma7_eval_direct(b, 1 / K) == pytest.approx(-math.log(K - 1))
    assert cs.lemma7_eval_direct(b, -2 / K) == 0.0
    assert cs.lemma7_eval_direct(b, 0.5) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("K", [6, 13])
def test_track_identities(K):
    b = cs.HatBasis.logit(K)
    z = np.linspace(-1, 2, 3001)
    for j, tracks in enumerate(cs.lemma7_tracks(b, z), start=1):
        f1, f2, f3, f4 = tracks
        np.testing.assert_allclose(f3 - f4, z, atol=1e-14)
        partial = sum(b.a(k) * cs.hat(z, k, K) for k in range(-1, j - 1))
        np.testing.assert_allclose(f1 - f2, partial, atol=1e-12)


@pytest.mark.parametrize("K", [6, 12])
def test_network_shape_and_boundedness(K):
    arch, w = cs.lemma7_network(cs.HatBasis.logit(K))
    assert arch.widths == (7,) * (K + 3)
    z = np.linspace(-1, 2, 10001)
    v = cs.lemma7_eval_network(cs.HatBasis.logit(K), z)
    assert np.abs(v).max() <= math.log(K + 1)
    assert np.abs(v[(z <= -2 / K) | (z >= 1 + 2 / K)]).max() < 1e-12


def test_network_piecewise_linear_knots():
    K = 12
    b = cs.HatBasis.logit(K)
    z = np.linspace(-0.5, 1.5, 24001)          # knots k/K lie on this grid
    v = cs.lemma7_eval_network(b, z)
    second = np.abs(v[:-2] - 2 * v[1:-1] + v[2:])
    kinks = z[1:-1][second > 1e-9]
    assert np.all(np.abs(kinks * K - np.round(kinks * K)) < 1e-6)


def test_loss_gap_near_degenerate_eta():
    for K in (6, 12, 24, 48):
        env = cs.lemma7_envelope(K)
        assert cs.lemma7_loss_gap(np.zeros(11), np.zeros(11), K) <= env
        assert cs.lemma7_loss_gap(np.ones(11), np.ones(11), K) <= env
    # even K has a knot at 1/2 with value 0 = logit(1/2)
    assert cs.lemma7_loss_gap(np.array([0.5]), np.array([0.5]), 12) == pytest.approx(0.0, abs=1e-12)


def test_compile_mean_of_pixels():
    nets = {(1, 1): cs.mean_node_net(1, 4)}
    arch, w = cs.compile_hmp_to_cnn(nets, 1, 2, 2)
    x = np.random.default_rng(0).random((20, 2, 2))
    np.testing.assert_allclose(cm.cnn_forward(arch, w, x), x.reshape(20, 4).mean(axis=1), atol=1e-15)


def test_compile_max_over_placements():
    nets = cs.random_node_nets(1, 2, 4, seed=3)
    arch, w = cs.compile_hmp_to_cnn(nets, 1, 4, 4)
    net = nets[(1, 1)]
    fa = cm.FnnArchitecture((4, 4), in_dim=4)
    x = np.random.default_rng(1).random((30, 4, 4))
    brute = [max(cm.fnn_forward(fa, net, np.array([xi[i, j], xi[i, j + 1], xi[i + 1, j], xi[i + 1, j + 1]]))
                 for i in range(3) for j in range(3)) for xi in x]
    np.testing.assert_allclose(cm.cnn_forward(arch, w, x), brute, atol=1e-12)


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([4, 8]), st.integers(0, 10 ** 6))
def test_compiled_sizes_formula(level, L_net, r_net, seed):
    nets = cs.random_node_nets(level, L_net, r_net, seed)
    arch, _ = cs.compile_hmp_to_cnn(nets, level, 8, 8)
    assert arch.depth == (4 ** level - 1) // 3 * L_net + level
    assert set(arch.channels) == {(2 * 4 ** level + 4) // 3 + r_net}
    assert arch.filter_sizes == tuple(2 ** cm.pi_schedule(s, level, L_net) for s in range(1, arch.depth + 1))


def test_compile_level3_matches_oracle():
    nets = cs.random_node_nets(3, 1, 4, seed=8)
    arch, w = cs.compile_hmp_to_cnn(nets, 3, 9, 10)
    x = np.random.default_rng(2).random((50, 9, 10))
    np.testing.assert_allclose(cm.cnn_forward(arch, w, x), cs.hierarchical_eval_nets(nets, 3, x), atol=1e-9)


def test_compile_rejects_bad_nets():
    nets = cs.random_node_nets(2, 1, 4, seed=0)
    nets[(1, 2)] = cs.random_node_net(2, 4, np.random.default_rng(0))
    with pytest.raises(cm.ShapeError):
        cs.compile_hmp_to_cnn(nets, 2, 8, 8)
    with pytest.raises(cm.ShapeError):
        cs.compile_hmp_to_cnn(cs.random_node_nets(2, 1, 4, 0), 2, 3, 8)
    del nets[(2, 1)]
    with pytest.raises(cm.ShapeError):
        cs.compile_hmp_to_cnn(nets, 2, 8, 8)


def test_fit_node_net_approximates_smooth_node():
    from hmpcnn import hmp_model as hm
    node = hm.softmax_blend_node(0.2, 0.6, 0.1, 0.8)
    net = cs.fit_node_net(node, 2, 32, 4000, seed=0)
    z = np.random.default_rng(5).random((500, 4))
    fa = cm.FnnArchitecture((32, 32), in_dim=4)
    err = np.abs(cm.fnn_forward(fa, net, z) - node(z))
    assert err.max() < 0.1 and err.mean() < 0.02
