import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from branchformer.errors import ConfigError, ShapeError
from branchformer.nn import (
    DepthwiseConvParams,
    LayerNormParams,
    LinearParams,
    conv_subsample,
    depthwise_conv1d,
    dropout,
    gelu,
    init_subsampler,
    layer_norm,
    linear,
    sinusoidal_pe,
    softmax_rows,
    subsampled_length,
)
from branchformer.tensor import Tensor

rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 5), st.integers(2, 8)),
    elements=st.floats(-50, 50, allow_nan=False),
)


def _ln(d, gamma=1.0, beta=0.0):
    return LayerNormParams(Tensor(np.full(d, gamma)), Tensor(np.full(d, beta)))


def test_linear_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    same = linear(x, LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4))))
    assert np.array_equal(same.data, x.data)
    out = linear(Tensor([[1.0, 2.0]]), LinearParams(Tensor([[1.0], [1.0]]), Tensor([1.0])))
    assert out.data.tolist() == [[4.0]]
    b = Tensor([0.5, -1.0, 2.0])
    out = linear(Tensor(np.zeros((4, 2))), LinearParams(Tensor(np.ones((2, 3))), b))
    assert all(r.tolist() == b.data.tolist() for r in out.data)


def test_linear_rejects_wrong_width():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 3))), LinearParams(Tensor(np.ones((4, 2))), None))


def test_layer_norm_examples():
    assert np.abs(layer_norm(Tensor([[5.0, 5, 5, 5]]), _ln(4)).data).max() < 1e-12
    assert np.allclose(layer_norm(Tensor([[1.0, -1.0]]), _ln(2)).data, [[1.0, -1.0]], atol=1e-10)
    out = layer_norm(Tensor(np.random.default_rng(1).normal(size=(3, 4))), _ln(4, gamma=0.0, beta=0.7))
    assert np.array_equal(out.data, np.full((3, 4), 0.7))


@given(rows)
def test_layer_norm_standardizes(x):
    var = x.var(axis=1)
    out = layer_norm(Tensor(x), _ln(x.shape[1])).data
    for r in np.flatnonzero(var > 1e-6):
        assert abs(out[r].mean()) < 1e-10
        assert abs(out[r].var() - 1.0) < 1e-8


def test_gelu_examples():
    assert gelu(Tensor(0.0)).data == 0.0
    assert abs(gelu(Tensor(1.0)).item() - 0.841345) < 1e-6
    assert abs(gelu(Tensor(-10.0)).item()) < 1e-20
    assert abs(gelu(Tensor(30.0)).item() - 30.0) < 1e-12
    # exact erf form
    x = 0.37
    assert gelu(Tensor(x)).item() == pytest.approx(0.5 * x * (1 + math.erf(x / math.sqrt(2))), abs=1e-15)


def test_softmax_examples():
    assert softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    for c in (-7.0, 0.0, 123.4):
        assert np.allclose(softmax_rows(Tensor([[c, c, c]])).data, 1 / 3, atol=1e-15)
    assert np.allclose(softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data, [[0.09003, 0.24473, 0.66524]], atol=5e-6)


@given(rows, st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    p = softmax_rows(Tensor(x)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12
    assert (p >= 0).all()
    shifted = softmax_rows(Tensor(x + c)).data
    assert np.abs(shifted - p).max() < 1e-12


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.9, False, rng) is x


def test_dropout_preserves_expectation():
    x = Tensor(np.full(100_000, 3.0))
    out = dropout(x, 0.5, True, np.random.default_rng(7)).data
    assert abs(out.mean() - 3.0) < 0.03
    assert set(np.unique(out)) <= {0.0, 6.0}


def test_dropout_rate_bounds():
    with pytest.raises(ConfigError):
        dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))


def _dw(kernel, bias):
    return DepthwiseConvParams(Tensor(np.atleast_2d(kernel)), Tensor(np.atleast_1d(bias)))


def test_depthwise_conv_examples():
    x = Tensor([[1.0], [2.0], [3.0]])
    assert np.array_equal(depthwise_conv1d(x, _dw([0.0, 1.0, 0.0], 0.0)).data, x.data)
    assert depthwise_conv1d(x, _dw([1.0, 1.0, 1.0], 0.0)).data.ravel().tolist() == [3.0, 6.0, 5.0]
    out = depthwise_conv1d(x, _dw([0.0, 0.0, 0.0], 2.5))
    assert np.array_equal(out.data, np.full((3, 1), 2.5))


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
def test_depthwise_delta_kernel_is_exact_identity(x):
    C = x.shape[1]
    k = np.zeros((C, 5))
    k[:, 2] = 1.0
    out = depthwise_conv1d(Tensor(x), DepthwiseConvParams(Tensor(k), Tensor(np.zeros(C))))
    assert np.array_equal(out.data, x)


def test_sinusoidal_pe_examples():
    pe = sinusoidal_pe(5, 8).data
    assert pe[0].tolist() == [0.0, 1.0] * 4
    assert np.abs(pe).max() <= 1.0
    assert pe[1, 0] == pytest.approx(0.84147, abs=1e-5)
    assert pe[1, 1] == pytest.approx(0.54030, abs=1e-5)
    with pytest.raises(ConfigError):
        sinusoidal_pe(3, 5)


def test_subsample_length_examples():
    rng = np.random.default_rng(0)
    p = init_subsampler(rng, 8, 4, 6)
    assert conv_subsample(Tensor(rng.normal(size=(11, 8))), p).shape == (2, 6)
    assert conv_subsample(Tensor(rng.normal(size=(7, 8))), p).shape == (1, 6)
    with pytest.raises(ShapeError):
        conv_subsample(Tensor(rng.normal(size=(6, 8))), p)


def test_subsample_length_map_closed_form():
    for T in range(7, 513):
        assert subsampled_length(subsampled_length(T)) == ((T - 1) // 2 - 1) // 2
    # one real forward per decade to tie the formula to the op
    rng = np.random.default_rng(0)
    p = init_subsampler(rng, 8, 2, 4)
    for T in (7, 8, 9, 10, 63, 64, 512):
        out = conv_subsample(Tensor(rng.normal(size=(2, T, 8))), p)
        assert out.shape == (2, ((T - 1) // 2 - 1) // 2, 4)
