import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmpcnn import cnn_model as cm


def random_weights(arch, fnn_arch, seed):
    g = np.random.default_rng(seed)
    cnn = cm.CnnWeights.zeros(arch)
    cnn = cm.CnnWeights([g.normal(size=w.shape) for w in cnn.filters], [g.normal(size=b.shape) * 0.1 for b in cnn.biases],
                        g.normal(size=cnn.w_out.shape))
    fnn = cm.FnnWeights.zeros(fnn_arch)
    fnn = cm.FnnWeights([g.normal(size=w.shape) for w in fnn.weights], [g.normal(size=b.shape) for b in fnn.biases],
                        g.normal(size=fnn.w_out.shape), float(g.normal()))
    return cnn, fnn


def naive_cnn(arch, cnn, x):
    """Loop-level reference: taps beyond the grid are skipped."""
    d1, d2 = x.shape
    o = x[:, :, None]
    for w, b in zip(cnn.filters, cnn.biases):
        m, _, cin, cout = w.shape
        new = np.zeros((d1, d2, cout))
        for i in range(d1):
            for j in range(d2):
                acc = b.copy()
                for t1 in range(m):
                    for t2 in range(m):
                        if i + t1 < d1 and j + t2 < d2:
                            acc = acc + o[i + t1, j + t2] @ w[t1, t2]
                new[i, j] = np.maximum(acc, 0)
        o = new
    m = arch.filter_sizes[-1]
    return max(o[i, j] @ cnn.w_out for i in range(d1 - m + 1) for j in range(d2 - m + 1))


def test_forward_matches_loop_reference():
    arch = cm.CnnArchitecture((3, 2, 4), (2, 3, 2), 5, 6)
    cnn, _ = random_weights(arch, cm.FnnArchitecture((2,)), 0)
    x = np.random.default_rng(1).random((4, 5, 6))
    got = cm.cnn_forward(arch, cnn, x)
    for b in range(4):
        assert got[b] == pytest.approx(naive_cnn(arch, cnn, x[b]), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 4))
def test_padding_equals_dropped_taps(seed, m, cin):
    g = np.random.default_rng(seed)
    x = g.random((2, 5, 6, cin))
    w = g.normal(size=(m, m, cin, 3))
    b = g.normal(size=3)
    np.testing.assert_array_equal(cm.conv_layer(x, w, b), cm.conv_layer_dropped_taps(x, w, b))


def test_shape_mismatch_rejected():
    arch = cm.CnnArchitecture((2,), (2,), 4, 4)
    cnn = cm.CnnWeights([np.zeros((3, 3, 1, 2))], [np.zeros(2)], np.zeros(2))
    with pytest.raises(cm.ShapeError):
        cm.cnn_forward(arch, cnn, np.zeros((4, 4)))
    with pytest.raises(cm.ShapeError):
        cm.cnn_forward(arch, cm.CnnWeights.zeros(arch), np.zeros((5, 4)))
    with pytest.raises(cm.ShapeError):
        cm.CnnArchitecture((2,), (5,), 4, 4)


def test_truncation_and_sign():
    assert cm.sgn(0.0) == 1 and cm.sgn(-1e-300) == -1
    np.testing.assert_array_equal(cm.truncate(np.array([-9.0, 0.5, 9.0]), 2.0), [-2.0, 0.5, 2.0])
    arch, fa = cm.CnnArchitecture((2,), (2,), 4, 4), cm.FnnArchitecture((3,))
    cnn, fnn = random_weights(arch, fa, 4)
    fnn.b_out = 100.0
    p = cm.Predictor(arch, fa, cnn, fnn, beta=1.5)
    out = p(np.random.default_rng(0).random((10, 4, 4)))
    assert np.all(np.abs(out) <= 1.5)


def test_fnn_forward_shapes():
    fa = cm.FnnArchitecture((3, 2))
    _, fnn = random_weights(cm.CnnArchitecture((1,), (1,), 1, 1), fa, 2)
    z = np.linspace(-1, 1, 5)
    batch = cm.fnn_forward(fa, fnn, z)
    assert batch.shape == (5,)
    assert cm.fnn_forward(fa, fnn, 0.3) == pytest.approx(cm.fnn_forward(fa, fnn, np.array([0.3]))[0])


def reference_pi(s, level, q):
    # direct reading of the level boundaries: level i starts after the blocks of levels < i
    starts = [1]
    for i in range(1, level):
        starts.append(starts[-1] + 4 ** (level - i) * q + 1)
    return sum(s >= b for b in starts)


def test_pi_schedule_worked_example():
    sch = cm.schedule_from_theorem1(2, 1.0, 2, 8, 8, c3=1e-9)
    assert sch.blocks_per_level == 1
    assert sch.cnn.depth == 7
    assert sch.cnn.filter_sizes == (2, 2, 2, 2, 2, 4, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.data())
def test_pi_schedule_against_reference(level, q, data):
    top = (4 ** level - 1) // 3 * q + level
    s = data.draw(st.integers(1, top))
    assert cm.pi_schedule(s, level, q) == reference_pi(s, level, q)


def test_schedule_sizes_grow_with_n():
    a = cm.schedule_from_theorem1(256, 1.0, 1, 8, 8)
    b = cm.schedule_from_theorem1(4096, 1.0, 1, 8, 8)
    assert a.cnn.depth <= b.cnn.depth and a.fnn.depth <= b.fnn.depth
    assert b.beta == pytest.approx(np.log(4096))
    with pytest.raises(ValueError):
        cm.schedule_from_theorem1(256, 1.0, 1, 8, 8, scale=1.5)


def test_weights_round_trip_and_checksum():
    arch, fa = cm.CnnArchitecture((2, 3), (2, 2), 4, 4), cm.FnnArchitecture((3,))
    cnn, fnn = random_weights(arch, fa, 7)
    blob = cm.weights_to_bytes(arch, cnn, fa, fnn, 2.5)
    d = cm.weights_from_bytes(blob)
    x = np.random.default_rng(0).random((3, 4, 4))
    p0 = cm.Predictor(arch, fa, cnn, fnn, 2.5)
    p1 = cm.Predictor(d["cnn_arch"], d["fnn_arch"], d["cnn"], d["fnn"], d["beta"])
    np.testing.assert_array_equal(p0(x), p1(x))
    bad = bytearray(blob)
    bad[40] ^= 1
    with pytest.raises(ValueError):
        cm.weights_from_bytes(bytes(bad))
