"""Uniform affine quantization with dyadic scales."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .intmath import MAX_MANTISSA, DyadicScale, fit_dyadic, fit_dyadic_float, round_div
from .trace import integer_op

ALLOWED_BITS = (4, 6, 8)
MAX_WIDEN = 32  # step doublings allowed per channel when requantizing


class Granularity(enum.Enum):
    PER_TENSOR = "per-tensor"
    PER_TOKEN = "per-token"  # one scale per row (all axes but the last)
    PER_CHANNEL = "per-channel"  # one scale per column (last axis)


def _param_shape(shape, granularity):
    if granularity is Granularity.PER_TENSOR:
        return (1,) * len(shape)
    if granularity is Granularity.PER_TOKEN:
        return tuple(shape[:-1]) + (1,)
    return (1,) * (len(shape) - 1) + (shape[-1],)


def round_half_away(x):
    return np.where(x < 0, -np.floor(-x + 0.5), np.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Unsigned integer payload with dyadic scale(s) and zero-point(s).

    ``m``, ``k`` and ``zero_point`` are integer arrays shaped to broadcast
    against ``data`` along the granularity axis.
    """

    data: np.ndarray
    bits: int
    m: np.ndarray
    k: np.ndarray
    zero_point: np.ndarray
    granularity: Granularity = Granularity.PER_TENSOR

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            raise TypeError("QuantTensor payload must be integer")
        if not 2 <= self.bits <= 16:
            raise ValueError(f"unsupported bit-width {self.bits}")
        want = _param_shape(data.shape, self.granularity)
        for name in ("m", "k", "zero_point"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim == 0:
                arr = arr.reshape(want) if data.ndim else arr
            if arr.shape != want and data.ndim:
                raise ValueError(f"{name} shape {arr.shape} does not match {want}")
            object.__setattr__(self, name, arr)
        if np.any((self.m < 0) | (self.m > 255) | (self.k < 0) | (self.k > 255)):
            raise ValueError("dyadic scale out of 8-bit range")
        if data.size and (data.min() < 0 or data.max() > (1 << self.bits) - 1):
            raise ValueError(f"payload outside [0, 2^{self.bits} - 1]")
        object.__setattr__(self, "data", data.astype(np.int64))

    @property
    def shape(self):
        return self.data.shape

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.m == 0))

    @property
    def scale(self):
        """A single :class:`DyadicScale` or a list of them along the axis."""
        if self.granularity is Granularity.PER_TENSOR:
            return DyadicScale(int(self.m.flat[0]), int(self.k.flat[0]))
        return [DyadicScale(int(a), int(b)) for a, b in zip(self.m.flat, self.k.flat)]

    def step(self) -> np.ndarray:
        return self.m / np.exp2(self.k)

    def centered(self) -> np.ndarray:
        return self.data - self.zero_point

    def transpose(self) -> "QuantTensor":
        if self.data.ndim != 2:
            raise ValueError("transpose needs a 2-D tensor")
        flip = {
            Granularity.PER_TENSOR: Granularity.PER_TENSOR,
            Granularity.PER_TOKEN: Granularity.PER_CHANNEL,
            Granularity.PER_CHANNEL: Granularity.PER_TOKEN,
        }
        return QuantTensor(
            self.data.T, self.bits, self.m.T, self.k.T, self.zero_point.T, flip[self.granularity]
        )

    def columns(self, start: int, stop: int) -> "QuantTensor":
        """Column slice; per-channel parameters are sliced along with the data."""
        sl = slice(start, stop)
        if self.granularity is Granularity.PER_CHANNEL:
            return QuantTensor(
                self.data[..., sl], self.bits, self.m[..., sl], self.k[..., sl],
                self.zero_point[..., sl], self.granularity,
            )
        return QuantTensor(
            self.data[..., sl], self.bits, self.m, self.k, self.zero_point, self.granularity
        )

    def rows(self, start: int, stop: int) -> "QuantTensor":
        """Row slice; per-token parameters are sliced along with the data."""
        sl = slice(start, stop)
        if self.granularity is Granularity.PER_TOKEN:
            return QuantTensor(
                self.data[sl], self.bits, self.m[sl], self.k[sl], self.zero_point[sl],
                self.granularity,
            )
        return QuantTensor(
            self.data[sl], self.bits, self.m, self.k, self.zero_point, self.granularity
        )


def _constant_params(c: float, n: int):
    # single-level encoding (1 - 0) * |c| or (0 - 1) * |c|; n levels past 255
    if c == 0.0:
        return 0, DyadicScale(0, 0), 0
    top = 1 if abs(c) <= MAX_MANTISSA else n
    sc = fit_dyadic_float(abs(c) / top)
    return (top, sc, 0) if c > 0 else (0, sc, top)


def quantize(x, bits: int = 8, granularity: Granularity = Granularity.PER_TENSOR) -> QuantTensor:
    """Asymmetric min/max quantization; the float step is snapped to a dyadic.

    Integer levels are computed from the float step, exactly as in the
    textbook formula; the stored scale is its nearest dyadic approximation.
    A slice whose min equals its max is encoded with a single level so the
    constant survives the round trip (zero maps to scale m = 0).
    """
    if bits not in ALLOWED_BITS:
        raise ValueError(f"bits must be one of {ALLOWED_BITS}")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if x.ndim == 0:
        x = x.reshape(1)
    granularity = Granularity(granularity)
    n = (1 << bits) - 1
    pshape = _param_shape(x.shape, granularity)
    if granularity is Granularity.PER_TENSOR:
        axes = tuple(range(x.ndim))
    elif granularity is Granularity.PER_TOKEN:
        axes = (x.ndim - 1,)
    else:
        axes = tuple(range(x.ndim - 1))
    lo = x.min(axis=axes, keepdims=True) if axes else x
    hi = x.max(axis=axes, keepdims=True) if axes else x
    lo = np.broadcast_to(lo, pshape)
    hi = np.broadcast_to(hi, pshape)

    m = np.zeros(pshape, dtype=np.int64)
    k = np.zeros(pshape, dtype=np.int64)
    zp = np.zeros(pshape, dtype=np.int64)
    s = np.ones(pshape)
    const_level = {}
    for idx in np.ndindex(pshape):
        a, b = float(lo[idx]), float(hi[idx])
        if a == b:
            level, sc, z = _constant_params(a, n)
            const_level[idx] = level
        else:
            step = (b - a) / n
            sc = fit_dyadic_float(step)
            s[idx] = step
            z = int(round_half_away(np.float64(-a / step)))
        m[idx], k[idx], zp[idx] = sc.m, sc.k, z

    q = np.clip(round_half_away(x / s) + zp, 0, n).astype(np.int64)
    if const_level:
        q = np.broadcast_to(q, x.shape).copy()
        for idx, level in const_level.items():
            sel = tuple(i if d > 1 else slice(None) for i, d in zip(idx, pshape))
            q[sel] = level
    return QuantTensor(q, bits, m, k, zp, granularity)


def dequantize(q: QuantTensor) -> np.ndarray:
    return (q.data - q.zero_point) * (q.m / np.exp2(q.k))


@dataclass(frozen=True)
class StaticQuantParams:
    """Calibration-time per-channel quantization parameters (dyadic)."""

    m: np.ndarray
    k: np.ndarray
    zero_point: np.ndarray
    bits: int = 8

    @classmethod
    def from_range(cls, lo, hi, bits: int = 8) -> "StaticQuantParams":
        lo = np.minimum(np.asarray(lo, dtype=np.float64), 0.0)
        hi = np.maximum(np.asarray(hi, dtype=np.float64), 0.0)
        n = (1 << bits) - 1
        m = np.zeros(lo.shape, dtype=np.int64)
        k = np.zeros(lo.shape, dtype=np.int64)
        zp = np.zeros(lo.shape, dtype=np.int64)
        for i in np.ndindex(lo.shape):
            width = hi[i] - lo[i]
            if width <= 0.0:
                width = 1.0  # all-zero channel: any scale works
            num, den = Fraction(float(width)).as_integer_ratio()
            sc = fit_dyadic(num, den * n)
            m[i], k[i] = sc.m, sc.k
            zp[i] = int(round_half_away(np.float64(-lo[i] / sc.value)))
        return cls(m.reshape(1, -1), k.reshape(1, -1), zp.reshape(1, -1), bits)

    def covering(self, x) -> "StaticQuantParams":
        """Same params, refit only on channels where ``x`` would clamp."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.m.shape[-1])
        if x.shape[0] == 0:
            return self
        n = (1 << self.bits) - 1
        step = self.m / np.exp2(self.k)
        q = round_half_away(x / step) + self.zero_point
        over = np.any((q < 0) | (q > n), axis=0)
        if not over.any():
            return self
        lo = np.minimum(x.min(axis=0), -self.zero_point[0] * step[0])
        hi = np.maximum(x.max(axis=0), (n - self.zero_point[0]) * step[0])
        wide = StaticQuantParams.from_range(lo[over], hi[over], self.bits)
        m, k, zp = self.m.copy(), self.k.copy(), self.zero_point.copy()
        m[0, over], k[0, over], zp[0, over] = wide.m[0], wide.k[0], wide.zero_point[0]
        return StaticQuantParams(m, k, zp, self.bits)

    def quantize(self, x) -> QuantTensor:
        x = np.asarray(x, dtype=np.float64)
        n = (1 << self.bits) - 1
        step = self.m / np.exp2(self.k)
        q = np.clip(round_half_away(x / step) + self.zero_point, 0, n).astype(np.int64)
        return QuantTensor(q, self.bits, self.m, self.k, self.zero_point, Granularity.PER_CHANNEL)


@integer_op
def requantize_static(values: np.ndarray, num, shift, params: StaticQuantParams,
                      widen: bool = False) -> QuantTensor:
    """Map integers ``values * num / 2**shift`` onto fixed per-channel params.

    ``num`` and ``shift`` broadcast per row; the division uses only integer
    arithmetic: y = round(v * num * 2**k_c / (m_c * 2**shift)) + zp_c.
    With ``widen``, a channel that would clamp first has its zero point
    recentred; if its span still exceeds the levels, its step doubles until
    every value fits, instead of saturating.
    """
    values = np.asarray(values, dtype=np.int64)
    num = np.asarray(num, dtype=np.int64).reshape(-1, 1)
    shift = np.asarray(shift, dtype=np.int64).reshape(-1, 1)
    n = (1 << params.bits) - 1
    big = values.astype(object) * num.astype(object)
    m = params.m.astype(object)
    k = params.k.astype(object)
    zp = params.zero_point.astype(object)
    dead = params.m == 0
    safe_m = np.where(dead, 1, m)
    for _ in range(MAX_WIDEN if widen else 1):
        r = round_div(big << k, safe_m << shift.astype(object))
        r = np.where(dead, 0, r)
        if not widen:
            break
        r_lo = r.min(axis=0, keepdims=True)
        r_hi = r.max(axis=0, keepdims=True)
        clamps = (r_lo + zp < 0) | (r_hi + zp > n)
        fits = r_hi - r_lo <= n
        zp = np.where(clamps & fits, np.minimum(np.maximum(zp, -r_lo), n - r_hi), zp)
        grow = clamps & ~fits & (k > 0)
        if not grow.any():
            break
        k = np.where(grow, k - 1, k)
        zp = np.where(grow, round_div(zp, 2), zp)
    y = np.where(dead, zp, r + zp)
    out = np.clip(y, 0, n).astype(np.int64)
    return QuantTensor(out, params.bits, params.m, k.astype(np.int64), zp.astype(np.int64),
                       Granularity.PER_CHANNEL)
