import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from wsss import tensor as T

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_conv2d_scaling_identity():
    x = np.ones((1, 3, 3), dtype=np.float32)
    w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
    out = T.conv2d(x, w, np.zeros(1, dtype=np.float32))
    assert out.shape == (1, 3, 3)
    np.testing.assert_array_equal(out, 2.0)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_dirac_kernel_is_identity(rng, k):
    x = rng.normal(size=(3, 7, 6)).astype(np.float32)
    w = np.zeros((3, 3, k, k), dtype=np.float32)
    for c in range(3):
        w[c, c, k // 2, k // 2] = 1
    np.testing.assert_array_equal(T.conv2d(x, w, pad=k // 2), x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = T.conv2d(x, w, b, stride=stride, pad=pad)
    np.testing.assert_allclose(got, oracles.conv2d_loops(x, w, b, stride, pad), atol=1e-5)


def test_conv2d_loop_oracle_tight_float64(rng):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(x, w, None, pad=1)
    np.testing.assert_allclose(got, oracles.conv2d_loops(x, w, None, 1, 1), atol=1e-6)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match=r"\(2, 5, 5\).*\(3, 4, 3, 3\)"):
        T.conv2d(np.zeros((2, 5, 5)), np.zeros((3, 4, 3, 3)))


def test_conv2d_backward_adjoint(rng):
    # <conv(x), g> = <x, conv^T(g)> checks col2im against im2col
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    out, cols = T.conv2d(x, w, None, stride=2, pad=1, return_cols=True)
    g = rng.normal(size=out.shape)
    dx, dw, _ = T.conv2d_backward(g, x.shape, cols, w, stride=2, pad=1)
    assert np.isclose(np.sum(out * g), np.sum(x * dx))
    assert np.isclose(np.sum(out * g), np.sum(w * dw))


def test_conv2d_deterministic(rng):
    x = rng.normal(size=(4, 16, 16)).astype(np.float32)
    w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
    a = T.conv2d(x, w, pad=1)
    b = T.conv2d(x, w, pad=1)
    assert a.tobytes() == b.tobytes()


def test_relu():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


@given(hnp.arrays(np.float32, st.integers(1, 30), elements=finite))
def test_relu_oracle(x):
    expected = np.array([v if v > 0 else 0.0 for v in x], dtype=np.float32)
    np.testing.assert_array_equal(T.relu(x), expected)
    pos = np.abs(x)
    np.testing.assert_array_equal(T.relu(pos), pos)


def test_global_avg_pool():
    assert T.global_avg_pool(np.full((1, 3, 4), 2.5))[0] == 2.5
    assert T.global_avg_pool(np.array([[[0, 0], [0, 4.0]]]))[0] == 1.0


def test_global_avg_pool_oracle(rng):
    t = rng.normal(size=(5, 7, 7)).astype(np.float32)
    np.testing.assert_allclose(T.global_avg_pool(t), oracles.mean_loops(t), atol=1e-6)


def test_sigmoid(rng):
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    x = rng.normal(scale=5, size=50)
    np.testing.assert_allclose(T.sigmoid(x) + T.sigmoid(-x), 1.0, atol=1e-12)
    expected = [1 / (1 + np.exp(-v)) for v in x]
    np.testing.assert_allclose(T.sigmoid(x), expected, atol=1e-7)
    big = T.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(big))


def test_bilinear_upsample_constant():
    out = T.bilinear_upsample(np.full((2, 3, 3), 1.75, dtype=np.float32), 11, 7)
    np.testing.assert_allclose(out, 1.75, atol=1e-6)


def test_bilinear_upsample_midpoint():
    out = T.bilinear_upsample(np.array([[[0.0, 1.0], [0.0, 1.0]]]), 2, 3)
    np.testing.assert_allclose(out[0, :, 1], 0.5)
    np.testing.assert_allclose(out[0, :, 0], 0.0)
    np.testing.assert_allclose(out[0, :, 2], 1.0)


def test_bilinear_upsample_oracle(rng):
    t = rng.random((1, 2, 2))
    np.testing.assert_allclose(T.bilinear_upsample(t, 4, 4), oracles.upsample_align_corners(t, 4, 4), atol=1e-6)
    t = rng.random((3, 8, 8))
    np.testing.assert_allclose(T.bilinear_upsample(t, 64, 64), oracles.upsample_align_corners(t, 64, 64),
                               atol=1e-6)


def test_bilinear_upsample_rejects_shrink():
    with pytest.raises(ValueError):
        T.bilinear_upsample(np.zeros((1, 4, 4)), 3, 8)


def test_cosine_similarity_basic(rng):
    a = rng.normal(size=6)
    assert T.cosine_similarity(a, a) == pytest.approx(1.0)
    assert T.cosine_similarity([1, 0], [0, 1]) == 0.0
    assert T.cosine_similarity([0, 0], [1, 2]) == 0.0
    b = rng.normal(size=6)
    assert T.cosine_similarity(a, b) == pytest.approx(oracles.cosine(a, b), abs=1e-6)


@settings(max_examples=60)
@given(
    hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)),
    hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)),
    st.floats(1e-3, 1e3),
)
def test_cosine_similarity_properties(a, b, lam):
    v = T.cosine_similarity(a, b)
    assert abs(v) <= 1 + 1e-6
    assert v == pytest.approx(T.cosine_similarity(b, a), abs=1e-12)
    assert T.cosine_similarity(lam * a, b) == pytest.approx(v, abs=1e-6)


def test_cosine_matrix_matches_pairwise(rng):
    k = rng.normal(size=(4, 9))
    k[:, 3] = 0
    m = T.cosine_matrix(k)
    for i in range(9):
        for j in range(9):
            assert m[i, j] == pytest.approx(oracles.cosine(k[:, i], k[:, j]), abs=1e-9)


def test_minmax_normalize():
    np.testing.assert_allclose(T.minmax_normalize(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
    np.testing.assert_array_equal(T.minmax_normalize(np.full((3, 3), 7.0)), 0)


def test_minmax_normalize_oracle(rng):
    m = rng.normal(size=(8, 8)).astype(np.float32)
    out = T.minmax_normalize(m)
    np.testing.assert_allclose(out, oracles.minmax(m), atol=1e-6)
    assert out.min() == 0 and out.max() == 1


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(-100, 100)))
def test_minmax_idempotent_and_order_preserving(m):
    out = T.minmax_normalize(m)
    if m.max() > m.min():
        np.testing.assert_allclose(T.minmax_normalize(out), out, atol=1e-12)
        flat, nflat = m.ravel(), out.ravel()
        order = np.argsort(flat, kind="stable")
        assert np.all(np.diff(nflat[order]) >= 0)


def test_minmax_channels_matches_single(rng):
    t = rng.normal(size=(4, 6, 5))
    t[2] = 3.0
    expected = np.stack([T.minmax_normalize(c) for c in t])
    np.testing.assert_allclose(T.minmax_normalize_channels(t), expected, atol=1e-12)


def test_argmax_channel():
    assert np.all(T.argmax_channel(np.random.default_rng(0).random((1, 3, 3))) == 0)
    assert np.all(T.argmax_channel(np.ones((2, 4, 4))) == 0)


def test_argmax_channel_oracle(rng):
    t = rng.normal(size=(5, 4, 4))
    np.testing.assert_array_equal(T.argmax_channel(t), oracles.argmax_scan(t))


@given(hnp.arrays(np.float64, (3, 4, 4), elements=st.integers(-50, 50).map(float)))
def test_argmax_invariant_under_increasing_transform(t):
    np.testing.assert_array_equal(T.argmax_channel(t), T.argmax_channel(np.exp(t / 10) * 3 + 1))


def test_avg_pool_roundtrip_gradient(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    g = rng.normal(size=(2, 3, 2, 2))
    assert np.isclose(np.sum(T.avg_pool(x, 4) * g), np.sum(x * T.avg_pool_backward(g, 4)))
