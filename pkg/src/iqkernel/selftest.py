"""Fast built-in checks run by ``iqkernel selftest``."""

from __future__ import annotations

import math

import numpy as np

from .block import calibrate, int_forward
from .fsbr import (
    SITE_ORDER,
    ReconstructionConfig,
    SmoothingVector,
    apply_smoothing,
    identity_vectors,
)
from .intmath import fit_dyadic_float, i_sqrt_array
from .io import make_rng
from .model import QConfig, float_forward, random_block
from .nonlinear import ClipConfig
from .report import softmax_error, synthetic_logits
from .trace import trace_float


def _check(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **detail}


def run_selftest(seed: int = 0) -> dict:
    rng = make_rng(seed)
    checks = []

    n = rng.integers(0, 2**62, size=20000, dtype=np.int64)
    n = np.concatenate([np.arange(4096, dtype=np.int64), n])
    roots = i_sqrt_array(n).astype(np.int64)
    ok = np.all(roots * roots <= n) and np.all((roots + 1) * (roots + 1) > n)
    checks.append(_check("i_sqrt", ok, samples=int(n.size)))

    targets = np.exp2(rng.uniform(-16, np.log2(255), size=2000))
    worst = max(abs(fit_dyadic_float(t).value - t) / t for t in targets)
    checks.append(_check("fit_dyadic", worst <= 2.0**-8, worst_relative=worst))

    logits = synthetic_logits(seed)
    soft = softmax_error(logits, np.ones(logits.shape, dtype=bool), ClipConfig())
    checks.append(_check("clipped_softmax", soft["max_abs"] <= 0.047, **soft))

    block = random_block(rng, 32, 2, 64)
    x = rng.standard_normal((4, 8, 32))
    vecs = identity_vectors(block)
    vecs = [SmoothingVector(np.exp(rng.uniform(-2.3, 2.3, v.s.size)), site)
            for v, site in zip(vecs, SITE_ORDER)]
    fold_err = float(np.max(np.abs(float_forward(apply_smoothing(block, vecs), x)
                                   - float_forward(block, x))))
    checks.append(_check("fold_exactness", fold_err <= 1e-5, max_abs=fold_err))

    cb = calibrate(block, x, QConfig(8, 8), ReconstructionConfig(steps=2, seed=seed))
    with trace_float() as tr:
        y = int_forward(cb, x[:2])
    err = float(np.max(np.abs(y - float_forward(block, x[:2]))))
    checks.append(_check("integer_purity", tr.float_ops == 0 and math.isfinite(err),
                         integer_calls=tr.integer_calls, float_ops=tr.float_ops,
                         w8a8_max_abs=err))
    return {"seed": seed, "checks": checks}
