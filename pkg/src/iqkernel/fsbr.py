"""Channel smoothing folds and the block-reconstruction optimizer.

Each fold is an exact float reparameterization: activations on one side of
a pair of ops are divided by ``s`` per channel while the weights on the
other side absorb ``s``. The optimizer learns ``log s`` per site to minimise
the fake-quant block output error on calibration data.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace

import numpy as np

from .model import BlockWeights, QConfig, float_forward, simulated_forward
from .nonlinear import NormParams

log = logging.getLogger(__name__)

LOG_S_BOUND = np.log(1e3)


class Site(enum.Enum):
    SERIAL_LINEAR_NORM = "SerialLinearNorm"  # norm1 -> q/k/v projections
    SERIAL_LINEAR_LINEAR = "SerialLinearLinear"  # v projection -> output projection
    PARALLEL_LINEAR_LINEAR = "ParallelLinearLinear"  # norm2 -> shared gate/up input
    NONLINEAR_ACT_SMOOTH = "NonLinearActSmooth"  # gate x up inside SwiGLU


SITE_ORDER = tuple(Site)


@dataclass(frozen=True, eq=False)
class SmoothingVector:
    s: np.ndarray
    site: Site

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("smoothing vector must be 1-D and non-empty")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("smoothing factors must be finite and positive")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "site", Site(self.site))

    @classmethod
    def identity(cls, n: int, site: Site) -> "SmoothingVector":
        return cls(np.ones(n), site)

    def inverse(self) -> "SmoothingVector":
        return SmoothingVector(1.0 / self.s, self.site)


@dataclass(frozen=True)
class ReconstructionConfig:
    samples: int = 128
    learning_rate: float = 5e-3
    steps: int = 200
    epsilon_fd: float = 0.05
    softmax_unquantized: bool = True
    warm_start: bool = False
    # "spsa": central difference along random +-1 directions (2 evals/step);
    # "coordinate": one central difference per factor (2n evals/step)
    gradient: str = "spsa"
    directions: int = 2
    tolerance: float = 1e-6
    check_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.epsilon_fd > 0:
            raise ValueError("epsilon_fd must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.gradient not in ("spsa", "coordinate"):
            raise ValueError(f"unknown gradient estimator {self.gradient!r}")


def _check_s(s, n, what):
    vec = s.s if isinstance(s, SmoothingVector) else np.asarray(s, dtype=np.float64)
    if vec.shape != (n,):
        raise ValueError(f"smoothing vector of length {vec.shape} does not match {what} ({n})")
    if np.any(vec <= 0):
        raise ValueError("smoothing factors must be positive")
    return vec


# ---------------------------------------------------------------- folds

def fold_serial_linear_norm(norm: NormParams, w_next: np.ndarray, s):
    """Norm output divided by ``s``; the following linear's rows absorb it."""
    s = _check_s(s, w_next.shape[0], "rows of the next weight")
    if norm.gamma.shape != s.shape:
        raise ValueError("norm width does not match the smoothing vector")
    beta = None if norm.beta is None else norm.beta / s
    return NormParams(norm.gamma / s, beta), w_next * s[:, None]


def fold_serial_linear_linear(w1: np.ndarray, b1, w2: np.ndarray, s):
    """First linear's output columns divided by ``s``; second's rows absorb it."""
    if w1.shape[1] != w2.shape[0]:
        raise ValueError(f"cannot chain {w1.shape} and {w2.shape}")
    s = _check_s(s, w1.shape[1], "the shared channel count")
    b1 = None if b1 is None else np.asarray(b1, dtype=np.float64) / s
    return w1 / s[None, :], b1, w2 * s[:, None]


def fold_parallel_linear_linear(w_a: np.ndarray, w_b: np.ndarray, s):
    """Two linears on one input: both absorb ``s`` on their rows.

    The producer of the shared input must divide its output by ``s`` (for a
    norm, ``gamma / s``), which is what keeps the composition unchanged.
    """
    if w_a.shape[0] != w_b.shape[0]:
        raise ValueError(f"weights {w_a.shape} and {w_b.shape} do not share an input")
    s = _check_s(s, w_a.shape[0], "the shared input channel count")
    return w_a * s[:, None], w_b * s[:, None]


def fold_swiglu_nonlinear(w, v, b, c, s):
    """Gate path multiplied by ``s``, up path divided by it.

    Returns the folded (w, v, b, c) and the per-channel sigmoid divisor, so
    ``(x w' + b') * sigmoid((x w' + b') / s) * (x v' + c')`` equals the
    original SwiGLU.
    """
    if w.shape != v.shape:
        raise ValueError(f"gate {w.shape} and up {v.shape} weights differ")
    s = _check_s(s, w.shape[1], "the hidden channel count")
    b = np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    c = np.zeros(w.shape[1]) if c is None else np.asarray(c, dtype=np.float64)
    return w * s[None, :], v / s[None, :], b * s, c / s, s.copy()


def site_widths(block: BlockWeights) -> dict:
    d, f = block.d_model, block.d_ffn
    return {
        Site.SERIAL_LINEAR_NORM: d,
        Site.SERIAL_LINEAR_LINEAR: d,
        Site.PARALLEL_LINEAR_LINEAR: d,
        Site.NONLINEAR_ACT_SMOOTH: f,
    }


def identity_vectors(block: BlockWeights) -> list:
    return [SmoothingVector.identity(n, site) for site, n in site_widths(block).items()]


def apply_smoothing(block: BlockWeights, vectors) -> BlockWeights:
    """Fold every smoothing vector into a copy of the block."""
    out = block
    for vec in vectors:
        site = vec.site
        if site is Site.SERIAL_LINEAR_NORM:
            wqkv = np.concatenate([out.wq, out.wk, out.wv], axis=1)
            norm, wqkv = fold_serial_linear_norm(out.norm1, wqkv, vec)
            d = out.d_model
            out = replace(out, norm1=norm, wq=wqkv[:, :d], wk=wqkv[:, d:2 * d], wv=wqkv[:, 2 * d:])
        elif site is Site.SERIAL_LINEAR_LINEAR:
            # attention mixes tokens, not channels, so v's columns commute with it
            wv, _, wo = fold_serial_linear_linear(out.wv, None, out.wo, vec)
            out = replace(out, wv=wv, wo=wo)
        elif site is Site.PARALLEL_LINEAR_LINEAR:
            norm2 = NormParams(out.norm2.gamma / vec.s,
                               None if out.norm2.beta is None else out.norm2.beta / vec.s)
            wg, wu = fold_parallel_linear_linear(out.w_gate, out.w_up, vec)
            out = replace(out, norm2=norm2, w_gate=wg, w_up=wu)
        elif site is Site.NONLINEAR_ACT_SMOOTH:
            wg, wu, bg, bu, sig = fold_swiglu_nonlinear(out.w_gate, out.w_up, out.b_gate,
                                                        out.b_up, vec)
            out = replace(out, w_gate=wg, w_up=wu, b_gate=bg, b_up=bu,
                          swiglu_smooth=out.smooth() * sig)
        else:  # pragma: no cover
            raise ValueError(f"unknown site {site}")
    return out


# ---------------------------------------------------------------- warm start

def _absmax(x):
    return np.abs(x).reshape(-1, x.shape[-1]).max(axis=0)


def absmax_warm_start(block: BlockWeights, calib: np.ndarray) -> list:
    """s = sqrt(act_absmax / weight_absmax) per site, from float activations."""
    from .model import _merge_heads, _split_heads, causal_mask, rms_norm, softmax

    b = block
    x = np.asarray(calib, dtype=np.float64)
    eps = 1e-8

    def factor(act_max, w_max):
        s = np.sqrt(np.maximum(act_max, eps) / np.maximum(w_max, eps))
        return np.clip(s / np.exp(np.mean(np.log(s))), 1e-3, 1e3)

    xn = rms_norm(x, b.norm1)
    wqkv = np.concatenate([b.wq, b.wk, b.wv], axis=1)
    s1 = factor(_absmax(xn), np.abs(wqkv).max(axis=1))
    v_act = xn @ b.wv
    s2 = factor(_absmax(v_act), np.abs(b.wo).max(axis=1))
    q = _split_heads(xn @ b.wq, b.n_heads)
    k = _split_heads(xn @ b.wk, b.n_heads)
    scores = q @ np.swapaxes(k, -1, -2)
    if not b.scores_prescaled:
        scores = scores / np.sqrt(b.d_head)
    probs = softmax(scores, causal_mask(x.shape[-2]))
    h = x + _merge_heads(probs @ _split_heads(v_act, b.n_heads)) @ b.wo
    hn = rms_norm(h, b.norm2)
    s3 = factor(_absmax(hn), np.abs(np.concatenate([b.w_gate, b.w_up], axis=1)).max(axis=1))
    g = hn @ b.w_gate + b.gate_bias()
    u = hn @ b.w_up + b.up_bias()
    # equalize gate and up magnitudes: gate / s, up * s
    s4 = np.clip(np.sqrt(np.maximum(_absmax(u), eps) / np.maximum(_absmax(g), eps)), 1e-3, 1e3)
    sites = [s1, s2, s3, s4]
    return [SmoothingVector(s, site) for s, site in zip(sites, SITE_ORDER)]


# ---------------------------------------------------------------- optimizer

@dataclass
class ReconstructionResult:
    vectors: list
    initial_loss: float
    final_loss: float
    history: list
    fallback_sites: list


class ReconstructionError(RuntimeError):
    """Raised when the reconstruction loss becomes non-finite."""


def _split(theta, widths):
    out, at = [], 0
    for n in widths:
        out.append(theta[at:at + n])
        at += n
    return out


def make_loss(block: BlockWeights, calib, qconfig: QConfig, rconfig: ReconstructionConfig,
              clip: float | None = 15.0):
    calib = np.asarray(calib, dtype=np.float64)
    target = float_forward(block, calib)
    widths = list(site_widths(block).values())

    def loss_of_vectors(vectors) -> float:
        folded = apply_smoothing(block, vectors)
        y = simulated_forward(folded, calib, qconfig,
                              quantize_softmax_input=not rconfig.softmax_unquantized, clip=clip)
        val = float(np.mean((y - target) ** 2))
        if not np.isfinite(val):
            raise ReconstructionError("reconstruction loss is not finite")
        return val

    def loss(theta) -> float:
        parts = _split(np.exp(theta), widths)
        return loss_of_vectors([SmoothingVector(p, site) for p, site in zip(parts, SITE_ORDER)])

    return loss, loss_of_vectors, widths


def fsbr_reconstruct(block: BlockWeights, calib, qconfig: QConfig,
                     rconfig: ReconstructionConfig = ReconstructionConfig(),
                     clip: float | None = 15.0) -> ReconstructionResult:
    """Learn one smoothing vector per site by finite-difference Adam on log s.

    The result never has a higher loss than identity smoothing: after the
    optimizer, each site is reset to s = 1 if that alone lowers the loss,
    and the whole set falls back to identity if it still does not beat it.
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim == 2:
        calib = calib[None]
    if calib.size == 0 or calib.shape[0] == 0:
        raise ValueError("calibration set is empty")
    calib = calib[: rconfig.samples]
    rng = np.random.default_rng(rconfig.seed)
    loss, loss_of_vectors, widths = make_loss(block, calib, qconfig, rconfig, clip)

    theta0 = np.zeros(sum(widths))
    initial = loss(theta0)
    theta = theta0.copy()
    if rconfig.warm_start:
        warm = np.log(np.concatenate([v.s for v in absmax_warm_start(block, calib)]))
        if loss(warm) < initial:
            theta = warm
    best_theta, best = theta.copy(), loss(theta)
    history = [best]

    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta1, beta2 = 0.9, 0.999
    eps = rconfig.epsilon_fd
    last_check = best
    for step in range(1, rconfig.steps + 1):
        grad = np.zeros_like(theta)
        if rconfig.gradient == "coordinate":
            for i in range(theta.size):
                e = np.zeros_like(theta)
                e[i] = eps
                grad[i] = (loss(theta + e) - loss(theta - e)) / (2 * eps)
        else:
            for _ in range(rconfig.directions):
                delta = rng.choice([-1.0, 1.0], size=theta.size)
                diff = loss(theta + eps * delta) - loss(theta - eps * delta)
                grad += diff / (2 * eps) * delta
            grad /= rconfig.directions
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad * grad
        mhat = m1 / (1 - beta1**step)
        vhat = m2 / (1 - beta2**step)
        theta = theta - rconfig.learning_rate * mhat / (np.sqrt(vhat) + 1e-12)
        theta = np.clip(theta, -LOG_S_BOUND, LOG_S_BOUND)

        if step % rconfig.check_every == 0 or step == rconfig.steps:
            cur = loss(theta)
            history.append(cur)
            if cur < best:
                best, best_theta = cur, theta.copy()
            if abs(last_check - cur) <= rconfig.tolerance * max(abs(last_check), 1e-30):
                break
            last_check = cur

    parts = _split(np.exp(best_theta), widths)
    vectors = [SmoothingVector(p, site) for p, site in zip(parts, SITE_ORDER)]
    fallback = []
    for i, site in enumerate(SITE_ORDER):
        trial = list(vectors)
        trial[i] = SmoothingVector.identity(widths[i], site)
        val = loss_of_vectors(trial)
        if val < best:
            best, vectors = val, trial
            fallback.append(site)
    if best > initial:
        vectors = identity_vectors(block)
        best = initial
        fallback = list(SITE_ORDER)
    if fallback:
        log.info("smoothing reset to identity at %s", [s.value for s in fallback])
    return ReconstructionResult(vectors, initial, best, history, fallback)
