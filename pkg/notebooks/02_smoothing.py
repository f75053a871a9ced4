"""
Smoothing an outlier channel
============================

Folding per-channel factors into neighbouring weights leaves the float block
unchanged, and the learned factors lower the quantized block's error.
"""

import numpy as np

from iqkernel import QConfig, ReconstructionConfig, calibrate, float_forward, int_forward, random_block
from iqkernel.fsbr import SITE_ORDER, SmoothingVector, apply_smoothing, identity_vectors

rng = np.random.default_rng(3)
block = random_block(rng)
calib = rng.standard_normal((64, 16, 64))
evald = rng.standard_normal((8, 16, 64))
calib[..., 3] *= 100
evald[..., 3] *= 100

# any positive factors at all four sites: the float output does not move
vecs = [SmoothingVector(rng.uniform(0.1, 10, v.s.size), site)
        for v, site in zip(identity_vectors(block), SITE_ORDER)]
moved = np.abs(float_forward(apply_smoothing(block, vecs), evald) - float_forward(block, evald))
print("float change after folding:", moved.max())

ref = float_forward(block, evald)
plain = calibrate(block, calib, QConfig(4, 4), use_fsbr=False)
smooth = calibrate(block, calib, QConfig(4, 4), ReconstructionConfig(steps=30, warm_start=True))
rec = smooth.reconstruction
print(f"reconstruction loss {rec.initial_loss:.4f} -> {rec.final_loss:.4f}")
for name, cb in (("identity", plain), ("smoothed", smooth)):
    print(f"W4A4 {name:8s} MSE {np.mean((int_forward(cb, evald) - ref) ** 2):.4f}")
