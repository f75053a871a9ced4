import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iqkernel import (
    ClipConfig,
    Granularity,
    NormParams,
    dequantize,
    di_clipped_softmax,
    di_layernorm,
    di_rmsnorm,
    di_sigmoid,
    di_swiglu,
    quantize,
)
from iqkernel.model import rms_norm, sigmoid
from oracles import softmax

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 40)),
                    elements=st.integers(-128, 127).map(lambda v: v / 8))


@given(logit_rows)
def test_softmax_rows_sum_and_error(x):
    q = quantize(x, 8, Granularity.PER_TOKEN)
    y = di_clipped_softmax(q)
    assert np.all(y.data.sum(axis=1) <= 128)
    assert np.all(y.data.sum(axis=1) > 128 - x.shape[1])
    assert np.max(np.abs(y.data / 128 - softmax(dequantize(q)))) <= 0.047


@given(logit_rows)
def test_softmax_argmax_preserved(x):
    q = quantize(x, 8, Granularity.PER_TOKEN)
    y = di_clipped_softmax(q).data
    ref = softmax(dequantize(q))
    rows = np.arange(len(y))
    assert np.all(y[rows, ref.argmax(axis=1)] == y.max(axis=1))


def test_softmax_mask_zeroes_masked_entries():
    x = np.array([[1.0, 2.0, 3.0, 40.0]])
    mask = np.array([[True, True, True, False]])
    y = di_clipped_softmax(quantize(x, 8, Granularity.PER_TOKEN), mask=mask).data
    assert y[0, 3] == 0
    assert np.abs(y[0, :3] / 128 - softmax(x[:, :3])[0]).max() < 0.047


def test_softmax_clip_zeroes_far_entries():
    x = np.array([[0.0, -40.0, -5.0]])
    y = di_clipped_softmax(quantize(x, 8, Granularity.PER_TOKEN), ClipConfig.from_value(15)).data
    assert y[0, 1] == 0


def test_softmax_constant_row_is_uniform():
    y = di_clipped_softmax(quantize(np.full((2, 4), 3.0), 8, Granularity.PER_TOKEN)).data
    assert np.all(y == 32)


def test_softmax_errors():
    q = quantize(np.zeros((2, 3)), 8, Granularity.PER_TOKEN)
    with pytest.raises(ValueError):
        di_clipped_softmax(q, mask=np.zeros((2, 3), dtype=bool))
    with pytest.raises(ValueError):
        di_clipped_softmax(quantize(np.ones((2, 3)), 8, Granularity.PER_CHANNEL))


def test_clip_config():
    assert ClipConfig.from_value(15).value == 15
    assert ClipConfig.from_value(7.5) == ClipConfig(15, 1)
    with pytest.raises(ValueError):
        ClipConfig.from_value(0.1)
    with pytest.raises(ValueError):
        ClipConfig(0)


def _norm_case(rng, tokens, n, spread):
    x = rng.standard_normal((tokens, n)) * np.exp(rng.uniform(-spread, spread, n))
    gamma = 1 + 0.2 * rng.standard_normal(n)
    return quantize(x, 8, Granularity.PER_CHANNEL), NormParams(gamma)


@pytest.mark.parametrize("seed", range(5))
def test_rmsnorm_matches_float(seed):
    rng = np.random.default_rng(seed)
    xq, params = _norm_case(rng, 8, 32, 2.0)
    y = dequantize(di_rmsnorm(xq, params, 8))
    ref = rms_norm(dequantize(xq), params)
    assert np.max(np.abs(y - ref)) <= 0.03 * np.abs(ref).max()


@given(st.floats(0.01, 100))
def test_rmsnorm_scale_invariant(c):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 16))
    params = NormParams(np.ones(16))
    a = dequantize(di_rmsnorm(quantize(x, 8, Granularity.PER_TOKEN), params))
    b = dequantize(di_rmsnorm(quantize(x * c, 8, Granularity.PER_TOKEN), params))
    assert np.max(np.abs(a - b)) <= 0.05 * np.abs(a).max()


def test_rmsnorm_zero_row():
    xq = quantize(np.zeros((2, 8)), 8, Granularity.PER_TOKEN)
    assert np.all(dequantize(di_rmsnorm(xq, NormParams(np.ones(8)))) == 0)


def test_layernorm_matches_float():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 24)) + 2.0
    gamma, beta = 1 + 0.1 * rng.standard_normal(24), 0.1 * rng.standard_normal(24)
    xq = quantize(x, 8, Granularity.PER_TOKEN)
    xd = dequantize(xq)
    mu = xd.mean(axis=1, keepdims=True)
    ref = (xd - mu) / np.sqrt(((xd - mu) ** 2).mean(axis=1, keepdims=True)) * gamma + beta
    y = dequantize(di_layernorm(xq, NormParams(gamma, beta)))
    assert np.max(np.abs(y - ref)) <= 0.05 * np.abs(ref).max()


def test_rmsnorm_gamma_length_checked():
    with pytest.raises(ValueError):
        di_rmsnorm(quantize(np.ones((2, 4)), 8, Granularity.PER_TOKEN), NormParams(np.ones(3)))


# fine input scales, as SwiGLU feeds it (coarse ones have a one-step exp unit)
@given(st.integers(14, 18))
def test_sigmoid_monotone_and_close(k):
    x = np.arange(-(1 << (k - 4)), (1 << (k - 4)) + 1, 7)
    y = di_sigmoid(x, 128, k, 8)
    assert np.all(np.diff(y) >= 0)
    ref = sigmoid(x * 128 / 2.0**k)
    assert np.max(np.abs(y / 128 - ref)) <= 0.1


@pytest.mark.parametrize("seed", range(5))
def test_swiglu_matches_float(seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((6, 20)) * 3
    u = rng.standard_normal((6, 20))
    s = np.exp(rng.uniform(-1, 1, 20))
    gq = quantize(g * s, 8, Granularity.PER_TOKEN)
    uq = quantize(u / s, 8, Granularity.PER_TOKEN)
    y = dequantize(di_swiglu(gq, uq, s, 8))
    gd, ud = dequantize(gq), dequantize(uq)
    ref = (gd / s) * sigmoid(gd / s) * (ud * s)
    assert np.max(np.abs(y - ref)) <= 0.1 * np.abs(ref).max() + 1e-9


def test_swiglu_smoothing_is_output_invariant():
    rng = np.random.default_rng(7)
    g, u = rng.standard_normal((4, 12)), rng.standard_normal((4, 12))
    plain = dequantize(di_swiglu(quantize(g, 8, Granularity.PER_TOKEN),
                                 quantize(u, 8, Granularity.PER_TOKEN), np.ones(12)))
    s = np.exp2(rng.integers(-2, 3, 12)).astype(float)
    smooth = dequantize(di_swiglu(quantize(g * s, 8, Granularity.PER_TOKEN),
                                  quantize(u / s, 8, Granularity.PER_TOKEN), s))
    ref = g * sigmoid(g) * u
    assert np.max(np.abs(plain - ref)) < 0.15
    assert np.max(np.abs(smooth - ref)) < 0.15


def test_swiglu_errors():
    q = quantize(np.ones((2, 3)), 8, Granularity.PER_TOKEN)
    with pytest.raises(ValueError):
        di_swiglu(q, q, np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        di_swiglu(q, quantize(np.ones((2, 4)), 8, Granularity.PER_TOKEN), np.ones(3))
