"""
Integer kernels, one at a time
==============================

Dyadic scales, the bitwise square root, the shift-only exponential and the
clipped softmax, each compared with its float counterpart.
"""

import numpy as np

from iqkernel import Granularity, dequantize, di_clipped_softmax, di_exp, fit_dyadic, i_sqrt, quantize
from iqkernel.intmath import fit_dyadic_float

# a float step becomes m / 2**k with 8-bit m and k
for step in (0.1, 1 / 3, 0.0173, 200.0):
    sc = fit_dyadic_float(step)
    print(f"step {step:<8g} -> {sc.m:3d} / 2^{sc.k:<3d} = {sc.value:.6g}")

# floor square root from shifts and compares only
print([i_sqrt(n) for n in (0, 15, 16, 2**40 + 5, 2**64 - 1)])

# shift-only exponential: values / unit ~ exp(x * s)
sc = fit_dyadic(1, 1 << 12)
x = np.arange(-4096 * 4, 1, 2048)
out = di_exp(x, sc.m, sc.k)
for xi, r in zip(x, out.ratio()):
    print(f"x*s = {xi * sc.value:6.2f}  exp ~ {r:.4f}  true {np.exp(xi * sc.value):.4f}")

# clipped softmax on 8-bit logits, output in units of 1/128
rng = np.random.default_rng(0)
logits = rng.integers(-128, 128, size=(4, 10)) / 8
q = quantize(logits, 8, Granularity.PER_TOKEN)
probs = di_clipped_softmax(q).data / 128
ref = np.exp(dequantize(q) - dequantize(q).max(1, keepdims=True))
ref /= ref.sum(1, keepdims=True)
print("softmax max error", np.abs(probs - ref).max())
