"""
End to end: bit-widths and integer purity
=========================================

The same toy block at W8A8, W6A6 and W4A4, plus a traced run showing that
nothing between the boundary quantize and dequantize touches a float.
"""

import numpy as np

from iqkernel import (
    Granularity,
    QConfig,
    ReconstructionConfig,
    calibrate,
    float_forward,
    int_forward,
    random_block,
    trace_float,
)

rng = np.random.default_rng(7)
block = random_block(rng)
calib = rng.standard_normal((128, 16, 64))
evald = rng.standard_normal((16, 16, 64))
ref = float_forward(block, evald)

for bits in (8, 6, 4):
    cb = calibrate(block, calib, QConfig(bits, bits), ReconstructionConfig(steps=10))
    for g in (Granularity.PER_TOKEN, Granularity.PER_TENSOR):
        err = int_forward(cb, evald, granularity=g) - ref
        print(f"W{bits}A{bits} {g.value:10s} max-abs {np.abs(err).max():.3f}  "
              f"MSE {np.mean(err ** 2):.5f}")

with trace_float() as tr:
    int_forward(cb, evald[0])
print(f"{tr.integer_calls} integer op calls, {tr.float_ops} float operations")
