"""Toy LLaMA-style block: weights, float reference and fake-quant forward.

Weights follow the ``x @ W`` convention, shape (in_features, out_features).
Every forward here accepts inputs shaped (..., tokens, d_model) so a whole
calibration batch runs in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nonlinear import NormParams


@dataclass(frozen=True)
class QConfig:
    """Weight and activation bit-widths, e.g. W4A4."""

    wbits: int = 8
    abits: int = 8

    def __post_init__(self):
        if self.wbits not in (4, 6, 8) or self.abits not in (4, 6, 8):
            raise ValueError("bit-widths must be 4, 6 or 8")

    @property
    def name(self) -> str:
        return f"W{self.wbits}A{self.abits}"


@dataclass(frozen=True, eq=False)
class BlockWeights:
    d_model: int
    n_heads: int
    d_ffn: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm1: NormParams
    norm2: NormParams
    b_gate: np.ndarray | None = None
    b_up: np.ndarray | None = None
    # set once 1/sqrt(d_head) has been folded into wq
    scores_prescaled: bool = False
    # per-channel divisor inside the SwiGLU sigmoid (None means all ones)
    swiglu_smooth: np.ndarray | None = field(default=None)

    def __post_init__(self):
        d, f = self.d_model, self.d_ffn
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={d}")
        want = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
        }
        for name, shape in want.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        for name in ("b_gate", "b_up", "swiglu_smooth"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=np.float64)
                if arr.shape != (f,):
                    raise ValueError(f"{name} must have length {f}")
                object.__setattr__(self, name, arr)
        for norm in (self.norm1, self.norm2):
            if norm.gamma.shape != (d,):
                raise ValueError("norm gamma length must equal d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def with_prescaled_scores(self) -> "BlockWeights":
        if self.scores_prescaled:
            return self
        return replace(self, wq=self.wq / np.sqrt(self.d_head), scores_prescaled=True)

    def gate_bias(self) -> np.ndarray:
        return np.zeros(self.d_ffn) if self.b_gate is None else self.b_gate

    def up_bias(self) -> np.ndarray:
        return np.zeros(self.d_ffn) if self.b_up is None else self.b_up

    def smooth(self) -> np.ndarray:
        return np.ones(self.d_ffn) if self.swiglu_smooth is None else self.swiglu_smooth


def random_block(rng: np.random.Generator, d_model: int = 64, n_heads: int = 4,
                 d_ffn: int = 172) -> BlockWeights:
    """Gaussian weights scaled by fan-in; values are exactly float32-representable."""

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32).astype(np.float64)

    def vec(n, center, spread):
        return (center + spread * rng.standard_normal(n)).astype(np.float32).astype(np.float64)

    d, f = d_model, d_ffn
    return BlockWeights(
        d, n_heads, f,
        wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d),
        w_gate=mat(d, f), w_up=mat(d, f), w_down=mat(f, d),
        norm1=NormParams(vec(d, 1.0, 0.1)), norm2=NormParams(vec(d, 1.0, 0.1)),
        b_gate=np.zeros(f), b_up=np.zeros(f),
    )


def causal_mask(tokens: int) -> np.ndarray:
    return np.tril(np.ones((tokens, tokens), dtype=bool))


def rms_norm(x, params: NormParams):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    rms = np.sqrt(ms)
    y = np.divide(x, rms, out=np.zeros_like(x), where=rms > 0) * params.gamma
    if params.beta is not None:
        y = y + params.beta
    return y


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, mask=None, axis=-1):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _split_heads(x, n_heads):
    *lead, t, d = x.shape
    return np.moveaxis(x.reshape(*lead, t, n_heads, d // n_heads), -2, -3)


def _merge_heads(x):
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], -1)


def _check_input(block: BlockWeights, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != block.d_model:
        raise ValueError(f"input shape {x.shape} does not end in (tokens, {block.d_model})")
    return x


def float_forward(block: BlockWeights, x, causal: bool = True) -> np.ndarray:
    """Reference float block: pre-norm attention and SwiGLU FFN with residuals."""
    x = _check_input(block, x)
    t = x.shape[-2]
    xn = rms_norm(x, block.norm1)
    q = _split_heads(xn @ block.wq, block.n_heads)
    k = _split_heads(xn @ block.wk, block.n_heads)
    v = _split_heads(xn @ block.wv, block.n_heads)
    scores = q @ np.swapaxes(k, -1, -2)
    if not block.scores_prescaled:
        scores = scores / np.sqrt(block.d_head)
    probs = softmax(scores, causal_mask(t) if causal else None)
    h = x + _merge_heads(probs @ v) @ block.wo
    hn = rms_norm(h, block.norm2)
    g = hn @ block.w_gate + block.gate_bias()
    u = hn @ block.w_up + block.up_bias()
    act = g * sigmoid(g / block.smooth()) * u
    return h + act @ block.w_down


# ---------------------------------------------------------------- fake quant

def fake_quant(x, bits: int, axis) -> np.ndarray:
    """Asymmetric min/max quantize-dequantize reducing over ``axis``."""
    n = (1 << bits) - 1
    lo = np.minimum(x.min(axis=axis, keepdims=True), 0.0)
    hi = np.maximum(x.max(axis=axis, keepdims=True), 0.0)
    step = (hi - lo) / n
    step[step == 0] = 1.0
    zp = np.rint(-lo / step)
    q = x / step
    np.rint(q, out=q)
    q += zp
    np.clip(q, 0, n, out=q)
    q -= zp
    q *= step
    return q


def fq_token(x, bits):
    return fake_quant(x, bits, axis=-1)


def fq_weight(w, bits):
    # one scale per output channel (column)
    return fake_quant(w, bits, axis=0)


def fq_channel(x, bits, lo=None, hi=None):
    """Per-channel static quantization; ranges default to the batch's own."""
    axes = tuple(range(x.ndim - 1))
    if lo is None:
        lo = x.min(axis=axes)
    if hi is None:
        hi = x.max(axis=axes)
    n = (1 << bits) - 1
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    step = np.where(hi > lo, (hi - lo) / n, 1.0).astype(x.dtype)
    zp = np.rint(-lo / step).astype(x.dtype)
    q = np.clip(np.rint(x / step) + zp, 0, n)
    return (q - zp) * step


def simulated_forward(block: BlockWeights, x, qconfig: QConfig, causal: bool = True,
                      quantize_softmax_input: bool = False, clip: float | None = 15.0,
                      boundary_bits: int = 8, dtype=np.float32) -> np.ndarray:
    """Float emulation of the integer pipeline's quantization points.

    Used as the reconstruction objective; mirrors where the integer path
    quantizes (boundary, norm inputs and outputs, projections, softmax,
    SwiGLU) without the dyadic rounding of scales. Runs in float32 by
    default since it is evaluated thousands of times per calibration.
    """
    x = _check_input(block, x).astype(dtype)
    wb, ab = qconfig.wbits, qconfig.abits
    t = x.shape[-2]

    def weight(w):
        return fq_weight(w, wb).astype(dtype)

    def norm(v, params):
        return rms_norm(v, NormParams(params.gamma.astype(dtype),
                                      None if params.beta is None else params.beta.astype(dtype)))

    xq = fq_channel(x, boundary_bits)
    xn = fq_token(norm(xq, block.norm1), ab)
    q = _split_heads(fq_token(xn @ weight(block.wq), ab), block.n_heads)
    k = _split_heads(fq_token(xn @ weight(block.wk), ab), block.n_heads)
    v = _split_heads(fq_token(xn @ weight(block.wv), ab), block.n_heads)
    scores = q @ np.swapaxes(k, -1, -2)
    if not block.scores_prescaled:
        scores = scores / dtype(np.sqrt(block.d_head))
    mask = causal_mask(t) if causal else None
    if quantize_softmax_input:
        valid = np.ones(scores.shape, dtype=bool) if mask is None else np.broadcast_to(mask, scores.shape)
        top = np.where(valid, scores, -np.inf).max(axis=-1, keepdims=True)
        if clip is not None:
            scores = np.maximum(scores, top - dtype(clip))
        # masked entries take the row max so they do not widen the range
        scores = fq_token(np.where(valid, scores, top), 8)
    probs = np.round(softmax(scores, mask) * 128.0) / 128.0
    ctx = fq_token((probs @ v).astype(dtype), ab)
    wo = weight(block.wo)
    dh = block.d_head
    attn = sum(ctx[..., h, :, :] @ wo[h * dh:(h + 1) * dh] for h in range(block.n_heads))
    h = xq + attn
    hq = fq_channel(h, boundary_bits)
    hn = fq_token(norm(hq, block.norm2), ab)
    g = fq_token(hn @ weight(block.w_gate) + block.gate_bias().astype(dtype), 8)
    u = fq_token(hn @ weight(block.w_up) + block.up_bias().astype(dtype), 8)
    act = fq_token(g * sigmoid(g / block.smooth().astype(dtype)) * u, ab)
    return (h + act @ weight(block.w_down)).astype(np.float64)
