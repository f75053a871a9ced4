"""Calibration and the integer-only forward pass of the toy block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fsbr import (
    ReconstructionConfig,
    ReconstructionResult,
    apply_smoothing,
    fsbr_reconstruct,
    identity_vectors,
)
from .matmul import (
    Accumulator,
    add_accumulators,
    int_matmul,
    quant_to_accumulator,
    requantize,
)
from .model import BlockWeights, QConfig, causal_mask, float_forward, rms_norm
from .nonlinear import (
    ClipConfig,
    FixedNorm,
    FixedSmoothing,
    NormParams,
    di_clipped_softmax,
    di_rmsnorm,
    di_swiglu,
)
from .quant import (
    Granularity,
    QuantTensor,
    StaticQuantParams,
    dequantize,
    quantize,
    requantize_static,
    round_half_away,
)
from .trace import integer_op

ABLATIONS = ("fsbr", "clipped-softmax", "di-norm")
BOUNDARY_BITS = 8
NONLINEAR_INPUT_BITS = 8
BIAS_MAGNITUDE_BITS = 30


@dataclass(frozen=True, eq=False)
class FixedBias:
    """Bias in fixed point: ``values / 2**shift``."""

    values: np.ndarray
    shift: int

    @classmethod
    def from_float(cls, b) -> "FixedBias | None":
        b = np.asarray(b, dtype=np.float64)
        peak = float(np.max(np.abs(b))) if b.size else 0.0
        if peak == 0.0:
            return None
        shift = int(np.clip(BIAS_MAGNITUDE_BITS - 1 - np.floor(np.log2(peak)), 0, 60))
        return cls(round_half_away(b * 2.0**shift).astype(np.int64), shift)

    def to_float(self) -> np.ndarray:
        return self.values / 2.0**self.shift


@dataclass(frozen=True, eq=False)
class IntegerBlock:
    """Everything the integer forward pass reads; contains no floats."""

    d_model: int
    n_heads: int
    d_ffn: int
    abits: int
    wq: QuantTensor
    wk: QuantTensor
    wv: QuantTensor
    wo: QuantTensor
    w_gate: QuantTensor
    w_up: QuantTensor
    w_down: QuantTensor
    norm1: FixedNorm
    norm2: FixedNorm
    norm1_in: StaticQuantParams
    norm2_in: StaticQuantParams
    swiglu: FixedSmoothing
    clip: ClipConfig | None = ClipConfig()
    b_gate: FixedBias | None = None
    b_up: FixedBias | None = None

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(eq=False)
class CalibratedBlock:
    integer: IntegerBlock
    smoothing: list
    qconfig: QConfig
    clip: ClipConfig | None
    reconstruction: ReconstructionResult | None = None
    metadata: dict = field(default_factory=dict)


def _channel_range(x):
    flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    return flat.min(axis=0), flat.max(axis=0)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (tokens, d_model) or (batch, tokens, d_model), got {x.shape}")
    return x


def _residual_stream(block: BlockWeights, x):
    """Float input of the second norm (attention output plus residual)."""
    from .model import _merge_heads, _split_heads, softmax

    xn = rms_norm(x, block.norm1)
    q = _split_heads(xn @ block.wq, block.n_heads)
    k = _split_heads(xn @ block.wk, block.n_heads)
    v = _split_heads(xn @ block.wv, block.n_heads)
    scores = q @ np.swapaxes(k, -1, -2)
    if not block.scores_prescaled:
        scores = scores / np.sqrt(block.d_head)
    probs = softmax(scores, causal_mask(x.shape[-2]))
    return x + _merge_heads(probs @ v) @ block.wo


def calibrate(block: BlockWeights, calib, qconfig: QConfig = QConfig(),
              rconfig: ReconstructionConfig = ReconstructionConfig(),
              clip: ClipConfig | None = ClipConfig(), use_fsbr: bool = True) -> CalibratedBlock:
    """Learn smoothing, fold it, quantize weights and fix the norm-input scales."""
    calib = _as_batch(calib)
    if calib.shape[0] == 0 or calib.shape[1] == 0:
        raise ValueError("calibration set is empty")
    if calib.shape[-1] != block.d_model:
        raise ValueError(f"calibration width {calib.shape[-1]} != d_model {block.d_model}")
    calib = calib[: rconfig.samples]
    base = block.with_prescaled_scores()
    result = None
    if use_fsbr:
        clip_value = None if clip is None else clip.value
        result = fsbr_reconstruct(base, calib, qconfig, rconfig, clip=clip_value)
        vectors = result.vectors
    else:
        vectors = identity_vectors(base)
    folded = apply_smoothing(base, vectors)

    def wq(w):
        return quantize(w, qconfig.wbits, Granularity.PER_CHANNEL)

    h = _residual_stream(folded, calib)
    integer = IntegerBlock(
        d_model=folded.d_model, n_heads=folded.n_heads, d_ffn=folded.d_ffn,
        abits=qconfig.abits,
        wq=wq(folded.wq), wk=wq(folded.wk), wv=wq(folded.wv), wo=wq(folded.wo),
        w_gate=wq(folded.w_gate), w_up=wq(folded.w_up), w_down=wq(folded.w_down),
        norm1=folded.norm1.to_fixed(), norm2=folded.norm2.to_fixed(),
        norm1_in=StaticQuantParams.from_range(*_channel_range(calib), bits=BOUNDARY_BITS),
        norm2_in=StaticQuantParams.from_range(*_channel_range(h), bits=BOUNDARY_BITS),
        swiglu=FixedSmoothing.from_float(folded.smooth()),
        clip=clip,
        b_gate=FixedBias.from_float(folded.gate_bias()),
        b_up=FixedBias.from_float(folded.up_bias()),
    )
    return CalibratedBlock(integer, vectors, qconfig, clip, result)


# ---------------------------------------------------------------- integer path

def _bias_acc(bias: FixedBias | None, tokens: int):
    if bias is None:
        return None
    data = np.broadcast_to(bias.values, (tokens, bias.values.shape[0])).copy()
    return Accumulator(data, 1, bias.shift)


def _linear(x: QuantTensor, w: QuantTensor, bias, out_bits, granularity):
    acc = int_matmul(x, w)
    b = _bias_acc(bias, x.shape[0])
    if b is not None:
        acc = add_accumulators(acc, b)
    return requantize(acc, out_bits, granularity)


def _float_norm(x: QuantTensor, params: FixedNorm, out_bits: int, granularity):
    # ablation only: floating-point RMSNorm between dequantize and quantize
    gamma = params.gamma / 2.0**params.shift
    beta = None if params.beta is None else params.beta / 2.0**params.shift
    y = rms_norm(dequantize(x), NormParams(gamma, beta))
    return quantize(y, out_bits, granularity)


def _forward_sequence(ib: IntegerBlock, xq: QuantTensor, causal: bool,
                      granularity: Granularity, float_norm: bool, clipped: bool) -> Accumulator:
    tokens = xq.shape[0]
    ab = ib.abits
    dh = ib.d_head
    clip = ib.clip if clipped else None
    mask = causal_mask(tokens) if causal else None

    def norm(x, params):
        if float_norm:
            return _float_norm(x, params, ab, granularity)
        out = di_rmsnorm(x, params, ab)
        if granularity is Granularity.PER_TENSOR:
            out = requantize(quant_to_accumulator(out), ab, granularity)
        return out

    xn = norm(xq, ib.norm1)
    q = _linear(xn, ib.wq, None, ab, granularity)
    k = _linear(xn, ib.wk, None, ab, granularity)
    v = _linear(xn, ib.wv, None, ab, granularity)
    attn = None
    for h in range(ib.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = int_matmul(q.columns(lo, hi), k.columns(lo, hi).transpose())
        probs = di_clipped_softmax(scores, clip, NONLINEAR_INPUT_BITS, mask)
        ctx = requantize(int_matmul(probs, v.columns(lo, hi)), ab, granularity)
        part = int_matmul(ctx, ib.wo.rows(lo, hi))
        attn = part if attn is None else add_accumulators(attn, part)

    h_acc = add_accumulators(quant_to_accumulator(xq), attn)
    hq = requantize_static(h_acc.data, h_acc.num, h_acc.shift, ib.norm2_in, widen=True)
    hn = norm(hq, ib.norm2)
    gate = _linear(hn, ib.w_gate, ib.b_gate, NONLINEAR_INPUT_BITS, granularity)
    up = _linear(hn, ib.w_up, ib.b_up, NONLINEAR_INPUT_BITS, granularity)
    act = di_swiglu(gate, up, ib.swiglu, ab)
    if granularity is Granularity.PER_TENSOR:
        act = requantize(quant_to_accumulator(act), ab, granularity)
    ffn = int_matmul(act, ib.w_down)
    # the exact residual stream skips the static norm-input quantization
    return add_accumulators(h_acc, ffn)


@integer_op
def integer_block_forward(ib: IntegerBlock, xq: QuantTensor, causal: bool = True,
                          granularity: Granularity = Granularity.PER_TOKEN) -> Accumulator:
    """The integer-only region: quantized input in, exact accumulator out."""
    return _forward_sequence(ib, xq, causal, Granularity(granularity), False, True)


def int_forward(cb: CalibratedBlock, x, causal: bool = True,
                granularity: Granularity = Granularity.PER_TOKEN, ablate=()) -> np.ndarray:
    """Quantize at the boundary, run integer-only, dequantize the output.

    ``ablate`` may contain "clipped-softmax" (softmax over the full range) or
    "di-norm" (floating-point normalization); both leave the integer-only
    regime and exist to measure each component's contribution.
    """
    ablate = set(ablate)
    unknown = ablate - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s) {sorted(unknown)}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    batch = _as_batch(x)
    if batch.shape[-1] != cb.integer.d_model:
        raise ValueError(f"input width {batch.shape[-1]} != d_model {cb.integer.d_model}")
    granularity = Granularity(granularity)
    outs = []
    for seq in batch:
        # widen channels this input would clamp; the boundary is still float
        xq = cb.integer.norm1_in.covering(seq).quantize(seq)
        if ablate & {"clipped-softmax", "di-norm"}:
            acc = _forward_sequence(cb.integer, xq, causal, granularity,
                                    "di-norm" in ablate, "clipped-softmax" not in ablate)
        else:
            acc = integer_block_forward(cb.integer, xq, causal, granularity)
        outs.append(acc.to_float())
    out = np.stack(outs)
    return out[0] if single else out


def reference_forward(cb: CalibratedBlock, block: BlockWeights, x, causal: bool = True):
    """Float output of the original block, for comparison with int_forward."""
    return float_forward(block, x, causal)
