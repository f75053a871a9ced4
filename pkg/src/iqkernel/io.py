"""Tensor files: a JSON manifest plus a little-endian binary sidecar.

Each manifest entry records name, shape, dtype (f32, u8, u16 or i32), bit
width, dyadic scale, zero-point, granularity axis and the byte offset of the
payload in the sidecar. Model manifests add a ``meta`` object (topology,
smoothing vectors, bit-widths, clip length, PRNG).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .block import CalibratedBlock, FixedBias, IntegerBlock
from .fsbr import SmoothingVector
from .model import BlockWeights, QConfig
from .nonlinear import ClipConfig, FixedNorm, FixedSmoothing, NormParams
from .quant import Granularity, QuantTensor, StaticQuantParams

FORMAT = "iqkernel-tensors"
VERSION = 1
PRNG_NAME = "numpy.random.PCG64"

_DTYPES = {"f32": "<f4", "u8": "<u1", "u16": "<u2", "i32": "<i4"}


class FormatError(ValueError):
    """A manifest or payload does not match the expected layout."""


def prng_record(seed: int) -> dict:
    return {"name": PRNG_NAME, "numpy": np.__version__, "seed": int(seed)}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _int_list(a):
    a = np.asarray(a)
    return int(a) if a.ndim == 0 else [int(v) for v in a.reshape(-1)]


class TensorWriter:
    def __init__(self):
        self._entries = []
        self._chunks = []
        self._offset = 0

    def _append(self, name, arr, dtype, extra):
        if any(e["name"] == name for e in self._entries):
            raise FormatError(f"duplicate tensor name {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "shape": list(np.shape(arr)), "dtype": dtype,
                 "offset": self._offset, "nbytes": len(raw)}
        entry.update(extra)
        self._entries.append(entry)
        self._chunks.append(raw)
        self._offset += len(raw)

    def add_float(self, name: str, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if not np.array_equal(arr.astype(np.float32).astype(np.float64), arr):
            raise FormatError(f"{name}: values are not exactly representable as f32")
        self._append(name, arr, "f32", {"bits": 32, "scale": None, "zero_point": None, "axis": None})

    def add_int(self, name: str, arr):
        arr = np.asarray(arr, dtype=np.int64)
        if arr.size and (arr.min() < -(2**31) or arr.max() >= 2**31):
            raise FormatError(f"{name}: values overflow i32")
        self._append(name, arr, "i32", {"bits": 32, "scale": None, "zero_point": None, "axis": None})

    def add_quant(self, name: str, q: QuantTensor):
        dtype = "u8" if q.bits <= 8 else "u16"
        axis = {Granularity.PER_TENSOR: None, Granularity.PER_TOKEN: 0,
                Granularity.PER_CHANNEL: q.data.ndim - 1}[q.granularity]
        extra = {
            "bits": q.bits,
            "scale": {"m": _int_list(q.m), "k": _int_list(q.k)},
            "zero_point": _int_list(q.zero_point),
            "axis": axis,
            "granularity": q.granularity.value,
        }
        self._append(name, q.data, dtype, extra)

    def save(self, path, meta: dict | None = None):
        path = Path(path)
        sidecar = path.with_suffix(".bin")
        manifest = {"format": FORMAT, "version": VERSION, "binary": sidecar.name,
                    "tensors": self._entries, "meta": meta or {}}
        path.parent.mkdir(parents=True, exist_ok=True)
        sidecar.write_bytes(b"".join(self._chunks))
        text = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
        path.write_text(text + "\n", encoding="utf-8")
        return path


def _param_array(values, shape):
    return np.asarray(values, dtype=np.int64).reshape(shape)


def load_tensors(path):
    """Return ``(tensors, meta)``; quantized entries come back as QuantTensor."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported format {manifest.get('format')!r}")
    blob = (path.parent / manifest["binary"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise FormatError(f"{e['name']}: unknown dtype {e['dtype']!r}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise FormatError(f"{e['name']}: payload runs past the end of {manifest['binary']}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        if e["dtype"] == "f32":
            out[e["name"]] = arr.astype(np.float64)
        elif e["dtype"] == "i32":
            out[e["name"]] = arr.astype(np.int64)
        else:
            gran = Granularity(e["granularity"])
            shape = arr.shape
            pshape = {Granularity.PER_TENSOR: (1,) * len(shape),
                      Granularity.PER_TOKEN: tuple(shape[:-1]) + (1,),
                      Granularity.PER_CHANNEL: (1,) * (len(shape) - 1) + (shape[-1],)}[gran]
            out[e["name"]] = QuantTensor(
                arr.astype(np.int64), e["bits"],
                _param_array(e["scale"]["m"], pshape), _param_array(e["scale"]["k"], pshape),
                _param_array(e["zero_point"], pshape), gran,
            )
    return out, manifest.get("meta", {})


# ---------------------------------------------------------------- float models and data

_WEIGHTS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


def save_block(path, block: BlockWeights, meta: dict | None = None):
    w = TensorWriter()
    for name in _WEIGHTS:
        w.add_float(name, getattr(block, name))
    w.add_float("norm1.gamma", block.norm1.gamma)
    w.add_float("norm2.gamma", block.norm2.gamma)
    for name in ("b_gate", "b_up", "swiglu_smooth"):
        if getattr(block, name) is not None:
            w.add_float(name, getattr(block, name))
    info = {"kind": "block", "d_model": block.d_model, "n_heads": block.n_heads,
            "d_ffn": block.d_ffn, "scores_prescaled": block.scores_prescaled}
    info.update(meta or {})
    return w.save(path, info)


def load_block(path) -> tuple[BlockWeights, dict]:
    t, meta = load_tensors(path)
    if meta.get("kind") != "block":
        raise FormatError(f"{path} is not a block manifest")
    block = BlockWeights(
        meta["d_model"], meta["n_heads"], meta["d_ffn"],
        *(t[name] for name in _WEIGHTS),
        norm1=NormParams(t["norm1.gamma"]), norm2=NormParams(t["norm2.gamma"]),
        b_gate=t.get("b_gate"), b_up=t.get("b_up"),
        scores_prescaled=meta.get("scores_prescaled", False),
        swiglu_smooth=t.get("swiglu_smooth"),
    )
    return block, meta


def save_data(path, data, meta: dict | None = None):
    w = TensorWriter()
    w.add_float("data", data)
    info = {"kind": "data"}
    info.update(meta or {})
    return w.save(path, info)


def load_data(path) -> tuple[np.ndarray, dict]:
    t, meta = load_tensors(path)
    if "data" not in t:
        raise FormatError(f"{path} holds no 'data' tensor")
    return t["data"], meta


# ---------------------------------------------------------------- calibrated models

def _static_meta(p: StaticQuantParams) -> dict:
    return {"m": _int_list(p.m), "k": _int_list(p.k), "zero_point": _int_list(p.zero_point),
            "bits": p.bits}


def _static_from(d) -> StaticQuantParams:
    row = lambda v: np.asarray(v, dtype=np.int64).reshape(1, -1)  # noqa: E731
    return StaticQuantParams(row(d["m"]), row(d["k"]), row(d["zero_point"]), d["bits"])


def save_calibrated(path, cb: CalibratedBlock, meta: dict | None = None):
    ib = cb.integer
    w = TensorWriter()
    for name in _WEIGHTS:
        w.add_quant(name, getattr(ib, name))
    w.add_int("norm1.gamma", ib.norm1.gamma)
    w.add_int("norm2.gamma", ib.norm2.gamma)
    w.add_int("swiglu.alpha", ib.swiglu.alpha)
    for name in ("b_gate", "b_up"):
        bias = getattr(ib, name)
        if bias is not None:
            w.add_int(name, bias.values)
    rec = cb.reconstruction
    info = {
        "kind": "calibrated-block",
        "topology": {"d_model": ib.d_model, "n_heads": ib.n_heads, "d_ffn": ib.d_ffn,
                     "layout": "rmsnorm-attention-residual-rmsnorm-swiglu-residual"},
        "qconfig": {"wbits": cb.qconfig.wbits, "abits": cb.qconfig.abits},
        "clip": None if cb.clip is None else {"m": cb.clip.m, "k": cb.clip.k, "value": cb.clip.value},
        "norm1": {"shift": ib.norm1.shift},
        "norm2": {"shift": ib.norm2.shift},
        "swiglu": {"frac_bits": ib.swiglu.frac_bits},
        "bias_shift": {n: getattr(ib, n).shift for n in ("b_gate", "b_up") if getattr(ib, n)},
        "norm1_in": _static_meta(ib.norm1_in),
        "norm2_in": _static_meta(ib.norm2_in),
        "smoothing": [{"site": v.site.value, "s": [float(x) for x in v.s]} for v in cb.smoothing],
        "reconstruction": None if rec is None else {
            "initial_loss": rec.initial_loss, "final_loss": rec.final_loss,
            "fallback_sites": [s.value for s in rec.fallback_sites],
        },
    }
    info.update(cb.metadata)
    info.update(meta or {})
    return w.save(path, info)


def load_calibrated(path) -> CalibratedBlock:
    t, meta = load_tensors(path)
    if meta.get("kind") != "calibrated-block":
        raise FormatError(f"{path} is not a calibrated-block manifest")
    topo = meta["topology"]
    clip = None if meta["clip"] is None else ClipConfig(meta["clip"]["m"], meta["clip"]["k"])
    biases = {}
    for name in ("b_gate", "b_up"):
        biases[name] = FixedBias(t[name], meta["bias_shift"][name]) if name in t else None
    ib = IntegerBlock(
        d_model=topo["d_model"], n_heads=topo["n_heads"], d_ffn=topo["d_ffn"],
        abits=meta["qconfig"]["abits"],
        **{name: t[name] for name in _WEIGHTS},
        norm1=FixedNorm(t["norm1.gamma"], None, meta["norm1"]["shift"]),
        norm2=FixedNorm(t["norm2.gamma"], None, meta["norm2"]["shift"]),
        norm1_in=_static_from(meta["norm1_in"]),
        norm2_in=_static_from(meta["norm2_in"]),
        swiglu=FixedSmoothing(t["swiglu.alpha"], meta["swiglu"]["frac_bits"]),
        clip=clip,
        **biases,
    )
    smoothing = [SmoothingVector(np.asarray(v["s"]), v["site"]) for v in meta["smoothing"]]
    qconfig = QConfig(meta["qconfig"]["wbits"], meta["qconfig"]["abits"])
    known = {"kind", "topology", "qconfig", "clip", "norm1", "norm2", "swiglu", "bias_shift",
             "norm1_in", "norm2_in", "smoothing", "reconstruction"}
    extra = {k: v for k, v in meta.items() if k not in known}
    cb = CalibratedBlock(ib, smoothing, qconfig, clip, None, extra)
    cb.metadata["reconstruction"] = meta.get("reconstruction")
    return cb
