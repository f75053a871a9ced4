"""Error metrics comparing the integer pipeline with the float reference."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .block import CalibratedBlock, int_forward
from .model import (
    BlockWeights,
    _split_heads,
    causal_mask,
    float_forward,
    rms_norm,
    sigmoid,
    softmax,
)
from .nonlinear import ClipConfig, NormParams, di_clipped_softmax, di_rmsnorm, di_swiglu
from .quant import Granularity, dequantize, quantize


def error_metrics(y, ref) -> dict:
    y = np.asarray(y, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    diff = y - ref
    denom = float(np.linalg.norm(ref))
    rel = float(np.linalg.norm(diff)) / denom if denom > 0 else float(np.linalg.norm(diff))
    return {"max_abs": float(np.max(np.abs(diff))), "mse": float(np.mean(diff**2)), "relative": rel}


def attention_logits(block: BlockWeights, x) -> tuple[np.ndarray, np.ndarray]:
    """Float attention scores as 2-D rows plus the matching causal mask."""
    b = block.with_prescaled_scores()
    x = np.asarray(x, dtype=np.float64)
    xn = rms_norm(x, b.norm1)
    q = _split_heads(xn @ b.wq, b.n_heads)
    k = _split_heads(xn @ b.wk, b.n_heads)
    scores = q @ np.swapaxes(k, -1, -2)
    t = x.shape[-2]
    mask = np.broadcast_to(causal_mask(t), scores.shape)
    return scores.reshape(-1, t), mask.reshape(-1, t)


def softmax_error(logits, mask, clip: ClipConfig | None) -> dict:
    """DI-ClippedSoftmax vs float softmax on 8-bit per-token quantized logits."""
    masked = np.where(mask, logits, logits.max(axis=1, keepdims=True))
    q = quantize(masked, 8, Granularity.PER_TOKEN)
    probs = di_clipped_softmax(q, clip, 8, mask)
    y = probs.data / 128.0
    ref = softmax(dequantize(q), mask)
    top = np.where(mask, y, -1).max(axis=1)
    hit = y[np.arange(len(y)), np.argmax(np.where(mask, ref, -1), axis=1)] == top
    sums = probs.data.sum(axis=1)
    return {"max_abs": float(np.max(np.abs(y - ref))), "argmax_preserved": float(hit.mean()),
            "row_sum_min": int(sums.min()), "row_sum_max": int(sums.max())}


def per_op_errors(block: BlockWeights, cb: CalibratedBlock, x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    ib = cb.integer
    seq = x.reshape(-1, x.shape[-1])
    xq = ib.norm1_in.covering(seq).quantize(seq)
    gamma = NormParams(ib.norm1.gamma / 2.0**ib.norm1.shift)
    norm_int = dequantize(di_rmsnorm(xq, ib.norm1, 8))
    norm_ref = rms_norm(dequantize(xq), gamma)

    logits, mask = attention_logits(block, x)
    soft = softmax_error(logits, mask, cb.clip)

    hn = rms_norm(seq, block.norm2)
    g = quantize(hn @ block.w_gate + block.gate_bias(), 8, Granularity.PER_TOKEN)
    u = quantize(hn @ block.w_up + block.up_bias(), 8, Granularity.PER_TOKEN)
    act_int = dequantize(di_swiglu(g, u, np.ones(block.d_ffn), 8))
    gf, uf = dequantize(g), dequantize(u)
    act_ref = gf * sigmoid(gf) * uf
    return {
        "di_rmsnorm": error_metrics(norm_int, norm_ref),
        "di_clipped_softmax": soft,
        "di_swiglu": error_metrics(act_int, act_ref),
    }


@dataclass
class ErrorReport:
    qconfig: str
    clip_c: float | None
    seed: int
    granularity: str
    end_to_end: dict
    per_op: dict = field(default_factory=dict)
    ablations: dict = field(default_factory=dict)
    sweep_c: list = field(default_factory=list)
    runtime_s: float | None = None

    def check_finite(self):
        def walk(obj, path):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    walk(v, f"{path}.{k}")
            elif isinstance(obj, list):
                for i, v in enumerate(obj):
                    walk(v, f"{path}[{i}]")
            elif isinstance(obj, float) and not math.isfinite(obj):
                raise FloatingPointError(f"non-finite metric at {path}")
        walk(asdict(self), "report")

    def to_json(self) -> str:
        data = asdict(self)
        if data["runtime_s"] is None:
            del data["runtime_s"]
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = [f"## Error report ({self.qconfig}, c = {self.clip_c}, seed {self.seed})", "",
                 "| path | max abs | MSE | relative |", "|---|---|---|---|"]
        rows = [("end to end", self.end_to_end)]
        rows += [(f"ablate {k}", v) for k, v in self.ablations.items()]
        rows += [(k, v) for k, v in self.per_op.items() if "mse" in v]
        for name, m in rows:
            lines.append(f"| {name} | {m['max_abs']:.5g} | {m['mse']:.5g} | {m['relative']:.5g} |")
        soft = self.per_op.get("di_clipped_softmax")
        if soft:
            lines += ["", f"softmax max error {soft['max_abs']:.4f}, "
                          f"argmax preserved {soft['argmax_preserved']:.2%}"]
        if self.sweep_c:
            lines += ["", "| c | softmax max error (block) | softmax max error (synthetic) "
                          "| end-to-end max abs |", "|---|---|---|---|"]
            for row in self.sweep_c:
                lines.append(f"| {row['c']:g} | {row['softmax_max_abs']:.4f} | "
                             f"{row['synthetic_softmax_max_abs']:.4f} | "
                             f"{row['end_to_end_max_abs']:.5g} |")
        return "\n".join(lines) + "\n"


def synthetic_logits(seed: int = 0, rows: int = 2000, width: int = 32):
    """Random 8-bit logit rows spanning up to about +-64 (wider than any clip)."""
    rng = np.random.default_rng(seed)
    scale = np.exp2(rng.uniform(-6, -1, size=(rows, 1)))
    return rng.integers(-128, 128, size=(rows, width)) * scale


def sweep_clip(block: BlockWeights, cb: CalibratedBlock, x, values, granularity,
               seed: int = 0) -> list:
    logits, mask = attention_logits(block, x)
    wide = synthetic_logits(seed)
    wide_mask = np.ones(wide.shape, dtype=bool)
    ref = float_forward(block, x)
    rows = []
    for c in values:
        clip = ClipConfig.from_value(c)
        trial = CalibratedBlock(replace(cb.integer, clip=clip), cb.smoothing, cb.qconfig, clip)
        y = int_forward(trial, x, granularity=granularity)
        rows.append({
            "c": float(c),
            "softmax_max_abs": softmax_error(logits, mask, clip)["max_abs"],
            "synthetic_softmax_max_abs": softmax_error(wide, wide_mask, clip)["max_abs"],
            "end_to_end_max_abs": error_metrics(y, ref)["max_abs"],
        })
    return rows
