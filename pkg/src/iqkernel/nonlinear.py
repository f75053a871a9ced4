"""Integer-only softmax, normalization and SwiGLU."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .intmath import di_exp, i_sqrt, int_div, round_div
from .matmul import Accumulator, align_mantissas, quant_to_accumulator, requantize
from .quant import Granularity, QuantTensor, round_half_away
from .trace import integer_op

DEFAULT_CLIP = 15
NORM_FRAC_BITS = 8  # fractional bits carried by the integer rms
NORM_KEEP_BITS = 16  # magnitude kept before squaring
SMOOTH_FRAC_BITS = 16
GATE_EXTRA_BITS = 8
SOFTMAX_EXP_BITS = 8


@dataclass(frozen=True)
class ClipConfig:
    """Softmax clipping length ``c = m / 2**k`` in logit units."""

    m: int = DEFAULT_CLIP
    k: int = 0

    def __post_init__(self):
        if self.m <= 0 or self.k < 0:
            raise ValueError("clip length must be positive")

    @classmethod
    def from_value(cls, c: float) -> "ClipConfig":
        frac = Fraction(c).limit_denominator(1 << 16)
        den = frac.denominator
        if den & (den - 1):
            raise ValueError(f"clip value {c} is not dyadic")
        return cls(frac.numerator, den.bit_length() - 1)

    @property
    def value(self) -> float:
        return self.m / 2.0**self.k


@dataclass(frozen=True)
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        if self.beta is not None:
            beta = np.asarray(self.beta, dtype=np.float64)
            if beta.shape != self.gamma.shape:
                raise ValueError("beta and gamma lengths differ")
            object.__setattr__(self, "beta", beta)

    def to_fixed(self) -> "FixedNorm":
        peak = float(np.max(np.abs(self.gamma)))
        if self.beta is not None:
            peak = max(peak, float(np.max(np.abs(self.beta))))
        shift = 14 - int(np.floor(np.log2(peak))) if peak > 0 else 14
        shift = int(np.clip(shift, 0, 40))
        g = round_half_away(self.gamma * 2.0**shift).astype(np.int64)
        b = None if self.beta is None else round_half_away(self.beta * 2.0**shift).astype(np.int64)
        return FixedNorm(g, b, shift)


@dataclass(frozen=True)
class FixedNorm:
    """Norm weights in fixed point: gamma_j ~= gamma[j] / 2**shift."""

    gamma: np.ndarray
    beta: np.ndarray | None
    shift: int


@dataclass(frozen=True)
class FixedSmoothing:
    """Smoothing factors in fixed point: s_j ~= alpha[j] / 2**frac_bits."""

    alpha: np.ndarray
    frac_bits: int = SMOOTH_FRAC_BITS

    @classmethod
    def from_float(cls, s, frac_bits: int = SMOOTH_FRAC_BITS) -> "FixedSmoothing":
        s = np.asarray(getattr(s, "s", s), dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError("smoothing factors must be positive")
        alpha = round_half_away(s * 2.0**frac_bits).astype(np.int64)
        if np.any(alpha < 1):
            raise ValueError("smoothing factor underflows its fixed-point format")
        return cls(alpha, frac_bits)


def _row_params(q: QuantTensor):
    rows = q.shape[0]
    m = np.broadcast_to(q.m.reshape(-1) if q.m.size > 1 else q.m.reshape(1), (rows,))
    k = np.broadcast_to(q.k.reshape(-1) if q.k.size > 1 else q.k.reshape(1), (rows,))
    return m.astype(np.int64), k.astype(np.int64)


@integer_op
def di_clipped_softmax(
    x: QuantTensor | Accumulator,
    clip: ClipConfig | None = ClipConfig(),
    out_bits: int = 8,
    mask: np.ndarray | None = None,
    exp_bits: int = SOFTMAX_EXP_BITS,
) -> QuantTensor:
    """Row softmax of quantized logits, output scale ``1 / 2**(out_bits - 1)``.

    Rows are first requantized to 8 bits over at most ``c`` below their
    maximum; entries under the clip (and masked entries) come out as 0.
    ``x`` may be a raw matmul Accumulator, in which case the clipped
    requantization is the matmul's own output quantization.
    The max-subtracted residuals are shifted left by ``exp_bits`` before the
    shift-only exponential so its unit value is large enough that small
    probabilities are not truncated away; ``exp_bits=0`` feeds them raw.
    """
    if x.data.ndim != 2:
        raise ValueError("softmax expects 2-D rows")
    if x.shape[1] == 0:
        raise ValueError("softmax over an empty row")
    if isinstance(x, Accumulator):
        acc = x
    elif x.granularity is Granularity.PER_CHANNEL:
        raise ValueError("softmax rows need a per-token or per-tensor scale")
    else:
        acc = quant_to_accumulator(x)
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not np.all(valid.any(axis=1)):
        raise ValueError("every softmax row needs at least one unmasked entry")

    logits = requantize(acc, 8, Granularity.PER_TOKEN, clip=clip, mask=valid)
    m, k = _row_params(logits)
    data = np.where(valid, logits.data, np.iinfo(np.int64).min)
    delta = np.where(valid, logits.data - data.max(axis=1, keepdims=True), 0)
    # constant rows have all-zero residuals; any unit scale serves
    flat = (m == 0) | (delta.min(axis=1) == 0)
    m = np.where(flat, 1, m)
    k = np.where(flat, 0, k)
    e = di_exp(delta << exp_bits, m[:, None], k[:, None] + exp_bits).values
    e = np.where(valid, e, 0)
    y = int_div(e, e.sum(axis=1, keepdims=True), out_bits, rounding="floor")
    return QuantTensor(y, out_bits, 1, out_bits - 1, 0, Granularity.PER_TENSOR)


def _dyadic_reciprocal(value: int, extra_shift: int, precision: int = 20):
    """``1 / (value * 2**extra_shift)`` as ``num / 2**shift``."""
    s = value.bit_length() + precision
    return round_div(1 << s, value), s + extra_shift


@integer_op
def _di_norm_fixed(x: QuantTensor, params: FixedNorm, out_bits: int, center: bool) -> QuantTensor:
    if x.data.ndim != 2:
        raise ValueError("normalization expects (tokens, channels)")
    tokens, n = x.shape
    if params.gamma.shape[0] != n:
        raise ValueError(f"gamma has {params.gamma.shape[0]} entries for {n} channels")
    if x.granularity is Granularity.PER_CHANNEL:
        mult, _ = align_mantissas(x.m, x.k)
    else:
        # per-token / per-tensor scales cancel inside x / rms(x)
        mult = np.ones((1, n), dtype=np.int64)
    v = (x.data - x.zero_point) * mult
    if center:
        v = v - round_div(v.sum(axis=1, keepdims=True), np.int64(n))

    g = params.gamma.astype(np.int64)
    b = None if params.beta is None else params.beta.astype(np.int64)
    u = np.zeros((tokens, n), dtype=np.int64)
    num = np.zeros(tokens, dtype=np.int64)
    shift = np.zeros(tokens, dtype=np.int64)
    for i in range(tokens):
        row = v[i]
        peak = int(np.abs(row).max())
        drop = max(0, peak.bit_length() - NORM_KEEP_BITS)
        row = row >> drop
        ss = int(np.dot(row, row))
        rms = i_sqrt((ss << (2 * NORM_FRAC_BITS)) // n)
        if rms == 0:
            if b is None:
                num[i], shift[i] = 0, 0
            else:
                u[i] = b
                num[i], shift[i] = 1, params.shift
            continue
        u[i] = (g * row) << NORM_FRAC_BITS
        if b is not None:
            u[i] += b * rms
        num[i], shift[i] = _dyadic_reciprocal(rms, params.shift)
    return requantize(Accumulator(u, num, shift), out_bits, Granularity.PER_TOKEN)


def di_rmsnorm(x: QuantTensor, params, out_bits: int = 8) -> QuantTensor:
    """RMSNorm on per-channel quantized tokens; output is per-token at ``out_bits``.

    Channel scales are aligned by integer shifts, the root mean square comes
    from :func:`i_sqrt`, and gamma is applied as a fixed-point multiplier.
    """
    fixed = params.to_fixed() if isinstance(params, NormParams) else params
    return _di_norm_fixed(x, fixed, out_bits, False)


def di_layernorm(x: QuantTensor, params, out_bits: int = 8) -> QuantTensor:
    """LayerNorm: integer mean subtraction, then the RMSNorm path plus beta."""
    fixed = params.to_fixed() if isinstance(params, NormParams) else params
    return _di_norm_fixed(x, fixed, out_bits, True)


@integer_op
def di_sigmoid(x: np.ndarray, m, k, out_bits: int = 8) -> np.ndarray:
    """``sigmoid(x * m / 2**k)`` as integers at scale ``1 / 2**(out_bits - 1)``.

    Written as e^(x - M) / (e^(x - M) + e^(-M)) with M = max(x, 0) so one of
    the two exponentials is always the unit value.
    """
    x = np.asarray(x, dtype=np.int64)
    top = np.maximum(x, 0)
    e_num = di_exp(x - top, m, k).values
    e_off = di_exp(-top, m, k).values
    return int_div(e_num, e_num + e_off, out_bits)


@integer_op
def _di_swiglu_fixed(gate: QuantTensor, up: QuantTensor, smooth: FixedSmoothing,
                     out_bits: int, ratio_bits: int) -> QuantTensor:
    if gate.shape != up.shape:
        raise ValueError(f"gate {gate.shape} and up {up.shape} differ")
    if gate.data.ndim != 2 or smooth.alpha.shape[0] != gate.shape[1]:
        raise ValueError("smoothing vector length must match the gate channels")
    if np.any(smooth.alpha <= 0):
        raise ValueError("smoothing factors must be positive")
    if gate.granularity is Granularity.PER_CHANNEL or up.granularity is Granularity.PER_CHANNEL:
        raise ValueError("SwiGLU operands must be per-token or per-tensor")
    mg, kg = _row_params(gate)
    mu, ku = _row_params(up)
    g = gate.data - gate.zero_point
    u = up.data - up.zero_point

    # gate / s with GATE_EXTRA_BITS of extra resolution for the exponent
    x_sg = round_div(g << (smooth.frac_bits + GATE_EXTRA_BITS), smooth.alpha[None, :])
    exp_m = np.where(mg == 0, 1, mg)[:, None]
    exp_k = (np.where(mg == 0, 0, kg) + GATE_EXTRA_BITS)[:, None]
    ratio = di_sigmoid(x_sg, exp_m, exp_k, ratio_bits)
    prod = g * ratio * u
    shift = kg + ku + ratio_bits - 1
    if np.any(shift > 63):
        raise OverflowError("SwiGLU output shift exceeds 63; rescale the operands")
    return requantize(Accumulator(prod, mg * mu, shift), out_bits, Granularity.PER_TOKEN)


def di_swiglu(gate: QuantTensor, up: QuantTensor, smooth, out_bits: int = 8,
              ratio_bits: int = 8) -> QuantTensor:
    """``SiLU(g) * u`` for smoothed operands gate = g * s and up = u / s.

    ``smooth`` is a SmoothingVector, a float array or a FixedSmoothing.
    """
    if not isinstance(smooth, FixedSmoothing):
        smooth = FixedSmoothing.from_float(smooth)
    return _di_swiglu_fixed(gate, up, smooth, out_bits, ratio_bits)
