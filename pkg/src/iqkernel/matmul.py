"""Dynamic integer-only matrix multiplication.

The product of two quantized operands is accumulated exactly in int64, then
requantized with a step, zero-point and dyadic scale solved at runtime from
the accumulator's own range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .intmath import MAX_MANTISSA, DyadicScale, fit_dyadic, round_div
from .quant import Granularity, QuantTensor
from .trace import integer_op

MAX_ALIGN_SHIFT = 24
_INT64_SAFE = 1 << 62


@dataclass(frozen=True, eq=False)
class Accumulator:
    """Exact integer result with per-row dyadic scale.

    Real value of ``data[i, j]`` is ``data[i, j] * num[i] / 2**shift[i]``.
    """

    data: np.ndarray
    num: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        rows = self.data.shape[0]
        object.__setattr__(self, "num", np.broadcast_to(np.asarray(self.num, dtype=np.int64), (rows,)).copy())
        object.__setattr__(self, "shift", np.broadcast_to(np.asarray(self.shift, dtype=np.int64), (rows,)).copy())
        if np.any(self.num < 0):
            raise ValueError("accumulator scale numerator must be non-negative")

    @property
    def shape(self):
        return self.data.shape

    def to_float(self) -> np.ndarray:
        # boundary helper for tests and final output only
        return self.data * (self.num / np.exp2(self.shift))[:, None]


def _check_range(values, what):
    peak = int(np.max(np.abs(values))) if np.size(values) else 0
    if peak >= _INT64_SAFE:
        raise OverflowError(f"{what}: magnitude {peak} overflows the 64-bit accumulator")


def align_mantissas(m: np.ndarray, k: np.ndarray):
    """Per-element integer multipliers bringing ``m / 2**k`` onto one shift.

    Returns ``(mult, kmax)`` with ``m / 2**k == mult / 2**kmax``.
    """
    m = np.asarray(m, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    kmax = int(k.max())
    spread = kmax - int(k.min())
    if spread > MAX_ALIGN_SHIFT:
        raise OverflowError(
            f"scale alignment needs a {spread}-bit shift (limit {MAX_ALIGN_SHIFT}); "
            "channel scales are too far apart"
        )
    return m << (kmax - k), kmax


@integer_op
def int_matmul(x1: QuantTensor, x2: QuantTensor) -> Accumulator:
    """``(X1 - zp1) @ (X2 - zp2)`` with all scales folded into an Accumulator.

    Scales that vary along the inner dimension (x1 per-channel, x2 per-token)
    are aligned and multiplied into the operand before the product; scales
    varying along output columns (x2 per-channel) are multiplied into the
    product columns. Row scales of x1 stay as the accumulator's row scale.
    """
    if x1.data.ndim != 2 or x2.data.ndim != 2:
        raise ValueError("int_matmul expects 2-D operands")
    if x1.shape[1] != x2.shape[0]:
        raise ValueError(f"inner dimensions differ: {x1.shape} @ {x2.shape}")
    a = x1.data - x1.zero_point
    b = x2.data - x2.zero_point
    rows = x1.shape[0]
    shift = np.zeros(rows, dtype=np.int64)

    if x1.granularity is Granularity.PER_CHANNEL:
        mult, kk = align_mantissas(x1.m, x1.k)
        a = a * mult
        num1, shift1 = np.ones(rows, dtype=np.int64), np.full(rows, kk)
    else:
        num1 = np.broadcast_to(x1.m.reshape(-1), (rows,)).astype(np.int64)
        shift1 = np.broadcast_to(x1.k.reshape(-1), (rows,)).astype(np.int64)

    if x2.granularity is Granularity.PER_TOKEN:
        mult, kk = align_mantissas(x2.m, x2.k)
        b = b * mult
        num2, shift2 = 1, kk
    elif x2.granularity is Granularity.PER_CHANNEL:
        num2, shift2 = 1, None
    else:
        num2, shift2 = int(x2.m.flat[0]), int(x2.k.flat[0])

    _check_range(a, "left operand")
    _check_range(b, "right operand")
    bound = int(np.abs(a).max(initial=0)) * int(np.abs(b).max(initial=0)) * a.shape[1]
    if bound >= _INT64_SAFE:
        raise OverflowError("inner product may overflow the 64-bit accumulator")
    p = a @ b

    if shift2 is None:
        mult, kk = align_mantissas(x2.m, x2.k)
        p = p * mult
        _check_range(p, "column-scaled accumulator")
        shift2 = kk
    shift = shift1 + shift2
    return Accumulator(p, num1 * num2, shift)


@integer_op
def align_rows(acc: Accumulator) -> Accumulator:
    """Bring every row onto one shared scale ``1 / 2**K``."""
    live = acc.num > 0
    if not live.any():
        return Accumulator(np.zeros_like(acc.data), 0, 0)
    # zero-scale rows hold no value and do not take part in the alignment
    kmax = int(acc.shift[live].max())
    gap = np.where(live, kmax - acc.shift, 0)
    if np.any(gap > 62):
        raise OverflowError("row scales too far apart to align")
    mult = np.where(live, acc.num << gap, 0)
    data = acc.data * mult[:, None]
    _check_range(data, "row alignment")
    return Accumulator(data, 1, kmax)


@integer_op
def add_accumulators(a: Accumulator, b: Accumulator) -> Accumulator:
    """Exact sum of two accumulators (shift-aligned per row)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    # a zero-scale operand contributes nothing; align on the other one
    sa = np.where(a.num > 0, a.shift, b.shift)
    sb = np.where(b.num > 0, b.shift, sa)
    sa = np.where(a.num > 0, sa, sb)
    kmax = np.maximum(sa, sb)
    if np.any(kmax - np.minimum(sa, sb) > 62):
        raise OverflowError("residual scales too far apart to align")
    ma = np.where(a.num > 0, a.num << (kmax - sa), 0)
    mb = np.where(b.num > 0, b.num << (kmax - sb), 0)
    data = a.data * ma[:, None] + b.data * mb[:, None]
    _check_range(data, "residual add")
    return Accumulator(data, 1, kmax)


@integer_op
def quant_to_accumulator(q: QuantTensor) -> Accumulator:
    """Exact accumulator view of a 2-D quantized tensor."""
    centered = q.data - q.zero_point
    rows = q.shape[0]
    if q.granularity is Granularity.PER_CHANNEL:
        mult, kk = align_mantissas(q.m, q.k)
        return Accumulator(centered * mult, 1, kk)
    m = np.broadcast_to(q.m.reshape(-1), (rows,))
    k = np.broadcast_to(q.k.reshape(-1), (rows,))
    return Accumulator(centered, m, k)


def _requant_slice(p, valid, num, shift, n, clip):
    """Requantize one group of accumulator entries sharing the scale num/2**shift.

    Returns (levels, DyadicScale, zero_point, degenerate).
    """
    out = np.zeros(p.shape, dtype=np.int64)
    if not np.any(valid):
        return out, DyadicScale(0, 0), 0, True
    pv = p[valid]
    p_max = int(pv.max())
    p_min = int(pv.min())
    if clip is not None and num > 0:
        # clip length c expressed in accumulator units: c * 2**shift / num
        c_int = (clip.m << shift) // (num << clip.k)
        p_min = max(p_min, p_max - c_int)
    if num == 0 or p_max == p_min:
        value = p_max * num
        if value == 0:
            return out, DyadicScale(0, 0), 0, True
        # one level when the constant fits a dyadic, else all n levels
        top = 1 if abs(value) <= MAX_MANTISSA << shift else n
        sc = fit_dyadic(abs(value), top << shift)
        if value > 0:
            out[valid] = np.where(p[valid] >= p_max, top, 0)
            return out, sc, 0, True
        out[valid] = 0
        return out, sc, top, True
    rng = p_max - p_min
    sc = fit_dyadic(rng * num, n << shift)
    levels = round_div((p - p_min) * n, np.int64(rng))
    out = np.where(valid, np.clip(levels, 0, n), 0)
    # zero-point against the fitted step keeps the error bounded by the range
    zp = round_div(-p_min * num << sc.k, sc.m << shift)
    return out, sc, int(zp), False


@integer_op
def requantize(
    acc: Accumulator,
    out_bits: int,
    granularity: Granularity = Granularity.PER_TOKEN,
    clip=None,
    mask: np.ndarray | None = None,
) -> QuantTensor:
    """Dynamic requantization of an accumulator onto ``out_bits`` levels.

    Per-token mode solves one (m, k, zp) per row; per-tensor mode aligns the
    rows first. ``clip`` (a ClipConfig) raises each row's minimum to at most
    ``c`` below its maximum. ``mask`` marks entries that take part (others are
    emitted as level 0 and excluded from the range).
    """
    if out_bits not in (4, 6, 8):
        raise ValueError("out_bits must be 4, 6 or 8")
    granularity = Granularity(granularity)
    n = (1 << out_bits) - 1
    p = acc.data
    if p.ndim != 2:
        raise ValueError("requantize expects a 2-D accumulator")
    valid = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = p.shape[0]
    if granularity is Granularity.PER_TOKEN:
        data = np.zeros(p.shape, dtype=np.int64)
        m = np.zeros((rows, 1), dtype=np.int64)
        k = np.zeros((rows, 1), dtype=np.int64)
        zp = np.zeros((rows, 1), dtype=np.int64)
        for i in range(rows):
            levels, sc, z, _ = _requant_slice(
                p[i], valid[i], int(acc.num[i]), int(acc.shift[i]), n, clip
            )
            data[i], m[i, 0], k[i, 0], zp[i, 0] = levels, sc.m, sc.k, z
        return QuantTensor(data, out_bits, m, k, zp, Granularity.PER_TOKEN)
    if granularity is not Granularity.PER_TENSOR:
        raise ValueError("DI-MatMul output granularity is per-token or per-tensor")
    aligned = align_rows(acc)
    levels, sc, z, _ = _requant_slice(
        aligned.data, valid, int(aligned.num[0]), int(aligned.shift[0]), n, clip
    )
    return QuantTensor(levels, out_bits, sc.m, sc.k, z, Granularity.PER_TENSOR)


@integer_op
def di_matmul(
    x1: QuantTensor,
    x2: QuantTensor,
    out_bits: int = 8,
    granularity: Granularity = Granularity.PER_TOKEN,
    clip=None,
    mask: np.ndarray | None = None,
) -> QuantTensor:
    return requantize(int_matmul(x1, x2), out_bits, granularity, clip=clip, mask=mask)
