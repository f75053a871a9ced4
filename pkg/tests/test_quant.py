import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iqkernel import Granularity, QuantTensor, StaticQuantParams, dequantize, quantize
from iqkernel.quant import requantize_static

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite),
       st.sampled_from([4, 6, 8]), st.sampled_from(list(Granularity)))
def test_round_trip_within_half_step(x, bits, granularity):
    q = quantize(x, bits, granularity)
    err = np.abs(dequantize(q) - x)
    # dyadic snapping of the step adds up to 2^-8 relative per level used
    slack = np.broadcast_to(q.step() * (0.5 + (1 << bits) * 2.0**-8) + 1e-9, x.shape)
    assert np.all(err <= slack)


@given(st.floats(2.0**-16, 1e4) | st.floats(-1e4, -(2.0**-16)) | st.just(0.0),
       st.sampled_from(list(Granularity)))
def test_constant_tensor_survives(c, granularity):
    x = np.full((3, 4), c)
    q = quantize(x, 8, granularity)
    assert np.allclose(dequantize(q), x, rtol=2.0**-8, atol=0)


def test_per_channel_params_shape():
    q = quantize(np.arange(12.0).reshape(3, 4), 8, Granularity.PER_CHANNEL)
    assert q.m.shape == (1, 4)
    assert quantize(np.ones((3, 4)), 8, Granularity.PER_TOKEN).m.shape == (3, 1)


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize(np.full(3, 1e5))  # constant beyond 255 levels of the largest step
    with pytest.raises(ValueError):
        quantize(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        quantize(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        quantize(np.ones(3), bits=5)


def test_quant_tensor_validates_payload():
    with pytest.raises(ValueError):
        QuantTensor(np.array([[300]]), 8, 1, 0, 0)
    with pytest.raises(TypeError):
        QuantTensor(np.array([[0.5]]), 8, 1, 0, 0)


def test_transpose_and_slices_keep_values():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6))
    q = quantize(x, 8, Granularity.PER_TOKEN)
    assert np.array_equal(dequantize(q.transpose()), dequantize(q).T)
    assert np.array_equal(dequantize(q.rows(1, 3)), dequantize(q)[1:3])
    c = quantize(x, 8, Granularity.PER_CHANNEL)
    assert np.array_equal(dequantize(c.columns(2, 5)), dequantize(c)[:, 2:5])


def test_static_params_cover_calibration_range():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 5)) * np.array([1, 10, 0.1, 3, 100])
    p = StaticQuantParams.from_range(x.min(0), x.max(0))
    q = p.quantize(x)
    # the snapped step may undershoot the range by 2^-8 relative per level
    assert np.all(np.abs(dequantize(q) - x) <= q.step() * (0.5 + 255 * 2.0**-8) + 1e-9)


def test_covering_only_refits_clamping_channels():
    p = StaticQuantParams.from_range(np.full(3, -1.0), np.full(3, 1.0))
    x = np.array([[0.5, 5.0, -0.2]])
    wide = p.covering(x)
    assert np.array_equal(wide.m[0, [0, 2]], p.m[0, [0, 2]])
    q = wide.quantize(x)
    assert np.abs(dequantize(q) - x).max() < 0.05
    assert p.covering(np.zeros((1, 3))) is p


def _acc_of(x, shift=20):
    return np.round(x * 2.0**shift).astype(np.int64), np.ones(x.shape[0], dtype=np.int64), \
        np.full(x.shape[0], shift)


@given(arrays(np.float64, (6, 4), elements=st.floats(-3, 3)))
def test_requantize_static_matches_float_quantize(x):
    p = StaticQuantParams.from_range(np.full(4, -4.0), np.full(4, 4.0))
    q = requantize_static(*_acc_of(x), p)
    assert np.all(np.abs(dequantize(q) - x) <= q.step() * 0.5 + 2.0**-19)


@given(arrays(np.float64, (6, 4), elements=st.floats(-50, 50)))
def test_requantize_static_widen_never_clamps(x):
    p = StaticQuantParams.from_range(np.full(4, -1.0), np.full(4, 1.0))
    q = requantize_static(*_acc_of(x), p, widen=True)
    assert np.all(np.abs(dequantize(q) - x) <= q.step() * 0.5 + 2.0**-19)
    assert np.all(q.k <= p.k)
