"""Scalar and elementwise integer primitives.

Everything here works on Python ints or integer numpy arrays. Nothing in this
module touches floating point, except ``fit_dyadic_float`` which is a
boundary helper used when snapping a calibration-time float to a dyadic.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .trace import integer_op

MAX_MANTISSA = 255
MAX_SHIFT = 255


@dataclass(frozen=True)
class DyadicScale:
    """The rational ``m / 2**k`` with 8-bit ``m`` and ``k``."""

    m: int
    k: int

    def __post_init__(self):
        if not (0 <= self.m <= MAX_MANTISSA and 0 <= self.k <= MAX_SHIFT):
            raise ValueError(f"dyadic scale out of range: m={self.m}, k={self.k}")

    @property
    def value(self) -> float:
        return self.m / 2.0**self.k

    @property
    def exact(self) -> Fraction:
        return Fraction(self.m, 1 << self.k)

    @property
    def degenerate(self) -> bool:
        return self.m == 0


def round_div(a, b):
    """Integer ``a / b`` rounded half away from zero; ``b`` must be positive.

    Works elementwise on integer numpy arrays and on Python ints.
    """
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a = np.asarray(a)
        b = np.asarray(b)
        if np.any(b <= 0):
            raise ZeroDivisionError("round_div requires a positive divisor")
        mag = (2 * np.abs(a) + b) // (2 * b)
        return np.where(a < 0, -mag, mag)
    if b <= 0:
        raise ZeroDivisionError("round_div requires a positive divisor")
    mag = (2 * abs(a) + b) // (2 * b)
    return -mag if a < 0 else mag


def floor_log2(n: int) -> int:
    """Index of the most significant set bit of ``n``."""
    n = int(n)
    if n < 1:
        raise ValueError("floor_log2 is undefined for n < 1")
    return n.bit_length() - 1


def fit_dyadic(numerator: int, denominator: int) -> DyadicScale:
    """Nearest ``m / 2**k`` to ``numerator / denominator`` with m, k in [0, 255].

    The shift is fixed by pretending the mantissa is 256 and taking the floor
    of the resulting log2; the mantissa is then the rounded quotient. This is
    the optimum of the exhaustive search over all 256 x 256 pairs.
    """
    numerator = int(numerator)
    denominator = int(denominator)
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    if numerator < 0:
        raise ValueError("numerator must be non-negative")
    if numerator == 0:
        return DyadicScale(0, 0)
    if numerator > MAX_MANTISSA * denominator:
        raise ValueError(
            f"scale {numerator}/{denominator} exceeds the dyadic range (max 255)"
        )
    k = min(floor_log2((denominator << 8) // numerator), MAX_SHIFT)
    m = round_div(numerator << k, denominator)
    if m == 256:
        k -= 1
        m = round_div(numerator << k, denominator)
    return DyadicScale(int(m), int(k))


def fit_dyadic_float(x: float) -> DyadicScale:
    num, den = Fraction(float(x)).as_integer_ratio()
    return fit_dyadic(num, den)


def i_sqrt(n: int) -> int:
    """Exact floor square root by the bit-check method, 32 iterations (64-bit input)."""
    n = int(n)
    if n < 0 or n >= 1 << 64:
        raise ValueError("i_sqrt expects an unsigned 64-bit integer")
    root = 0
    for v in range(31, -1, -1):
        b = 1 << v
        trial = ((root << 1) + b) << v
        if n >= trial:
            root += b
            n -= trial
    return root


@integer_op
def i_sqrt_array(n: np.ndarray) -> np.ndarray:
    """Vectorised :func:`i_sqrt` over a uint64-representable array."""
    rem = np.asarray(n).astype(np.uint64)
    root = np.zeros_like(rem)
    for v in range(31, -1, -1):
        b = np.uint64(1 << v)
        trial = ((root << np.uint64(1)) + b) << np.uint64(v)
        take = rem >= trial
        root = np.where(take, root + b, root)
        rem = np.where(take, rem - trial, rem)
    return root


@integer_op
def int_div(a, b, p: int, rounding: str = "nearest"):
    """Fixed-point ratio ``round(a * 2**(p-1) / b)`` for ``0 <= a <= b``.

    The result carries the implicit scale ``1 / 2**(p-1)``. ``rounding="floor"``
    truncates instead, so ratios sharing a denominator never sum past one.
    """
    if not 2 <= p <= 16:
        raise ValueError("int_div output bits must be in [2, 16]")
    a_arr = np.asarray(a, dtype=np.int64)
    b_arr = np.asarray(b, dtype=np.int64)
    if np.any(b_arr <= 0):
        raise ZeroDivisionError("int_div divisor must be positive")
    if np.any(a_arr < 0) or np.any(a_arr > b_arr):
        raise ValueError("int_div expects 0 <= a <= b")
    if rounding == "nearest":
        out = round_div(a_arr << (p - 1), b_arr)
    elif rounding == "floor":
        out = (a_arr << (p - 1)) // b_arr
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if np.ndim(out) == 0:
        return int(out)
    return out


@dataclass(frozen=True)
class DyExpOutput:
    """Shift-only exponential values.

    ``values`` are proportional to ``exp(x * s)`` with the shared constant
    ``unit`` (the value produced at x = 0).
    """

    values: np.ndarray
    unit: np.ndarray

    def ratio(self) -> np.ndarray:
        return self.values / self.unit


def _exp_step(m, k):
    m = np.asarray(m, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    if np.any(m < 1):
        raise ValueError("di_exp needs a non-zero scale mantissa")
    if np.any(k > 61):
        raise OverflowError("di_exp shift too large for 64-bit arithmetic")
    # m * log2(e) ~ m * 1.4375
    m_f = m + (m >> 1) - (m >> 4)
    t = -round_div(np.left_shift(np.int64(1), k), m_f)
    if np.any(t == 0):
        raise ValueError("di_exp step rounds to zero: input scale too coarse (s > ~0.35)")
    if np.any(t < -(2**31 - 1)):
        raise OverflowError(
            f"di_exp step |t| = {int(-t.min())} exceeds 32 bits; reduce k relative to m"
        )
    return t


@integer_op
def di_exp(x, m, k) -> DyExpOutput:
    """Exponential of the non-positive integers ``x`` at scale ``m / 2**k``.

    ``m`` and ``k`` broadcast against ``x`` (e.g. one scale per row).
    """
    x = np.asarray(x, dtype=np.int64)
    if np.any(x > 0):
        raise ValueError("di_exp inputs must be max-subtracted (<= 0)")
    t = _exp_step(m, k)
    q = x // t
    r = x - q * t
    unshifted = r // 2 - t
    result = unshifted >> np.minimum(q, 63)
    return DyExpOutput(values=result, unit=np.broadcast_to(-t, result.shape))
