"""RReLU forms, slope gradients and sign canonicalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rotrelu import tensor as T
from rotrelu.errors import ContractError, DimensionError, UnsupportedStructureError
from rotrelu.layers import canonicalize, rrelu, rrelu_backward, rrelu_forward, rrelu_general_forward

from conftest import numeric_grads, rel_err

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_forward_examples():
    assert rrelu_forward(np.float32(2.0), np.array([0.5])) == 1.0
    assert rrelu_forward(np.float32(-3.0), np.array([5.0])) == 0.0


def test_forward_channel_axis():
    x = np.arange(-3, 3, dtype=np.float32).reshape(2, 3)
    out = rrelu_forward(x, np.array([1.0, 2.0, 3.0], np.float32))
    np.testing.assert_array_equal(out, [[0, 0, 0], [0, 2, 6]])
    x4 = np.ones((2, 3, 2, 2), np.float32)
    out4 = rrelu_forward(x4, np.array([1.0, -2.0, 0.5], np.float32))
    np.testing.assert_array_equal(out4[:, 1], -2 * np.ones((2, 2, 2)))


def test_forward_length_mismatch():
    with pytest.raises(DimensionError):
        rrelu_forward(np.ones((2, 3)), np.ones(4))


def test_general_form_examples():
    assert rrelu_general_forward(np.float32(0.2), np.array([1]), np.array([3.0])) == pytest.approx(0.6)
    assert rrelu_general_forward(np.float32(-0.4), np.array([-1]), np.array([-2.5])) == pytest.approx(-1.0)
    x = np.abs(np.random.default_rng(0).standard_normal((5, 4))) + 0.01
    np.testing.assert_array_equal(rrelu_general_forward(x, -np.ones(4), np.full(4, 7.0)), 0)


def test_general_form_four_shapes():
    x = np.linspace(-2, 2, 9)[:, None].repeat(4, axis=1)
    a = np.array([1, 1, -1, -1])
    b = np.array([2.0, -2.0, 2.0, -2.0])
    out = rrelu_general_forward(x, a, b)
    assert np.all(out[x[:, 0] > 0, 0] > 0) and np.all(out[x[:, 0] > 0, 1] < 0)
    assert np.all(out[x[:, 0] < 0, 2] > 0) and np.all(out[x[:, 0] < 0, 3] < 0)
    assert np.all(out[x[:, 0] < 0, :2] == 0) and np.all(out[x[:, 0] > 0, 2:] == 0)


def test_general_form_rejects_bad_sign():
    with pytest.raises(ContractError):
        rrelu_general_forward(np.ones((2, 2)), np.array([1, 0.5]), np.ones(2))


def test_backward_examples():
    rng = np.random.default_rng(0)
    x = np.abs(rng.standard_normal((4, 3))) + 0.1
    up = rng.standard_normal((4, 3))
    gx, _ = rrelu_backward(up, x, np.ones(3))
    np.testing.assert_array_equal(gx, up)
    _, gb = rrelu_backward(up, -x, rng.standard_normal(3))
    np.testing.assert_array_equal(gb, 0)


def test_backward_zero_subgradient():
    gx, gb = rrelu_backward(np.ones((1, 2)), np.zeros((1, 2)), np.array([3.0, 4.0]))
    np.testing.assert_array_equal(gx, 0)
    np.testing.assert_array_equal(gb, 0)


@pytest.mark.parametrize("shape", [(5, 4), (3, 4, 2, 2)])
def test_backward_matches_finite_differences(shape):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1, 1], shape)
    b = rng.standard_normal(shape[1])
    up = rng.standard_normal(shape)
    gx, gb = rrelu_backward(up, x, b)
    nx, nb = numeric_grads(lambda xx, bb: np.sum(rrelu_forward(xx, bb) * up), [x.copy(), b.copy()], 1e-6)
    assert rel_err(gx, nx) < 1e-4
    assert rel_err(gb, nb) < 1e-4


def test_backward_shape_mismatch():
    with pytest.raises(DimensionError):
        rrelu_backward(np.ones((2, 3)), np.ones((3, 2)), np.ones(2))


def test_graph_op_uses_backward():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    b = T.Tensor(rng.standard_normal(3), requires_grad=True)
    up = rng.standard_normal((6, 3))
    gx, gb = T.backward(T.tsum(T.mul(rrelu(x, b), T.Tensor(up))), [x, b])
    rx, rb = rrelu_backward(up, x.data, b.data)
    np.testing.assert_allclose(gx, rx)
    np.testing.assert_allclose(gb, rb)


# ---------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_reduces_to_relu_exactly(x):
    np.testing.assert_array_equal(rrelu_forward(x, np.ones(x.shape[1], np.float32)), T.relu(x).data)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)),
       st.floats(0, 100), st.integers(0, 2 ** 31))
def test_positive_homogeneity(x, c, seed):
    b = np.random.default_rng(seed).standard_normal(x.shape[1])
    np.testing.assert_allclose(rrelu_forward(x, c * b), c * rrelu_forward(x, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(2, 4), st.integers(1, 3), st.integers(1, 3)),
              elements=finite), st.integers(0, 2 ** 31))
def test_zero_slope_kills_channel(x, seed):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(x.shape[1]).astype(np.float32)
    i = int(rng.integers(0, x.shape[1]))
    b[i] = 0
    out = rrelu_forward(x, b)
    assert np.all(out[:, i] == 0)


# ------------------------------------------------------------ canonicalize

def test_canonicalize_identity():
    w = np.random.default_rng(0).standard_normal((4, 3))
    b = np.array([0.5, -1.0, 2.0])
    b2, w2 = canonicalize(np.ones(3), b, w)
    np.testing.assert_array_equal(b2, b)
    np.testing.assert_array_equal(w2, w)


@pytest.mark.parametrize("signs", [[1, -1, 1], [-1, -1, -1]])
def test_canonicalize_dense_equivalence(signs):
    rng = np.random.default_rng(4)
    a = np.array(signs)
    b = rng.standard_normal(3)
    w = rng.standard_normal((4, 3))
    b2, w2 = canonicalize(a, b, w)
    np.testing.assert_array_equal(b2, b)
    flipped = np.flatnonzero(a == -1)
    np.testing.assert_array_equal(w2[:, flipped], -w[:, flipped])
    x = rng.standard_normal((100, 4))
    diff = np.abs(rrelu_general_forward(x @ w, a, b) - rrelu_forward(x @ w2, b2)).max()
    assert diff < 1e-6


def _conv_bn_act(x, w, gamma, beta, rm, rv):
    h = T.conv2d(x, w, 1, 1)
    return T.batchnorm2d(h, gamma, beta, rm.copy(), rv.copy(), train=False).data


def test_canonicalize_conv_equivalence():
    rng = np.random.default_rng(5)
    a = rng.choice([-1, 1], 4)
    b = rng.standard_normal(4)
    w = rng.standard_normal((4, 2, 3, 3))
    b2, w2 = canonicalize(a, b, w)
    x = rng.standard_normal((100, 2, 6, 6))
    ref = rrelu_general_forward(T.conv2d(x, w, 1, 1).data, a, b)
    got = rrelu_forward(T.conv2d(x, w2, 1, 1).data, b2)
    assert np.abs(ref - got).max() < 1e-6


def test_canonicalize_through_batchnorm():
    rng = np.random.default_rng(6)
    a = np.array([-1, 1, -1])
    b = rng.standard_normal(3)
    w = rng.standard_normal((3, 2, 3, 3))
    gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    b2, w2, (g2, be2) = canonicalize(a, b, w, bn=(gamma, beta))
    x = rng.standard_normal((100, 2, 5, 5))
    ref = rrelu_general_forward(_conv_bn_act(x, w, gamma, beta, rm, rv), a, b)
    got = rrelu_forward(_conv_bn_act(x, w2, g2, be2, rm, rv), b2)
    assert np.abs(ref - got).max() < 1e-6


def test_canonicalize_unsupported_structure():
    with pytest.raises(UnsupportedStructureError):
        canonicalize(np.ones(3), np.ones(3), np.ones(3))
    with pytest.raises(ContractError):
        canonicalize(np.array([1, 2]), np.ones(2), np.ones((3, 2)))
