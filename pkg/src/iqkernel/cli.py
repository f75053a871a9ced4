"""Command-line front end: gen-toy, calibrate, run, compare, selftest.

Exit codes: 0 success, 2 validation error, 3 numerical-diagnostic abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .block import ABLATIONS, calibrate, int_forward
from .fsbr import ReconstructionConfig, ReconstructionError
from .io import (
    FormatError,
    load_block,
    load_calibrated,
    load_data,
    make_rng,
    prng_record,
    save_block,
    save_calibrated,
    save_data,
)
from .model import QConfig, float_forward, random_block
from .nonlinear import ClipConfig
from .quant import Granularity
from .report import ErrorReport, error_metrics, per_op_errors, sweep_clip
from .trace import trace_float

log = logging.getLogger("iqkernel")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class IntegerPurityError(RuntimeError):
    pass


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("IQKERNEL_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"IQKERNEL_SEED={env!r} is not an integer") from None


def _outlier(text):
    try:
        idx, mult = text.split(":")
        return int(idx), float(mult)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected INDEX:MULTIPLIER, got {text!r}") from None


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_data(rng, rows, tokens, d_model, channel_outliers=(), token_outliers=()):
    data = rng.standard_normal((rows, tokens, d_model))
    for ch, mult in channel_outliers:
        if not 0 <= ch < d_model:
            raise ValueError(f"outlier channel {ch} outside [0, {d_model})")
        data[..., ch] *= mult
    for tok, mult in token_outliers:
        if not 0 <= tok < tokens:
            raise ValueError(f"outlier token {tok} outside [0, {tokens})")
        data[:, tok, :] *= mult
    return _f32(data)


# ---------------------------------------------------------------- commands

def cmd_gen_toy(args):
    seed = resolve_seed(args.seed)
    if args.d_model % args.heads:
        raise ValueError("--heads must divide --d-model")
    rng = make_rng(seed)
    block = random_block(rng, args.d_model, args.heads, args.d_ffn)
    calib = make_data(rng, args.calib_rows, args.tokens, args.d_model,
                      args.outlier_channel, args.outlier_token)
    evald = make_data(rng, args.eval_rows, args.tokens, args.d_model,
                      args.outlier_channel, args.outlier_token)
    out = Path(args.out)
    outliers = {"channels": [list(c) for c in args.outlier_channel],
                "tokens": [list(t) for t in args.outlier_token]}
    meta = {"prng": prng_record(seed), "outliers": outliers}
    save_block(out / "model.json", block, meta)
    save_data(out / "calib.json", calib, meta)
    save_data(out / "eval.json", evald, meta)
    _emit({"model": str(out / "model.json"), "calib": str(out / "calib.json"),
           "eval": str(out / "eval.json"), "seed": seed})
    return EXIT_OK


def cmd_calibrate(args):
    seed = resolve_seed(args.seed)
    block, _ = load_block(args.model)
    calib, _ = load_data(args.calib)
    qconfig = QConfig(args.wbits, args.abits)
    rconfig = ReconstructionConfig(samples=args.samples, learning_rate=args.lr, steps=args.steps,
                                   epsilon_fd=args.epsilon, warm_start=args.warm_start, seed=seed)
    clip = ClipConfig(args.clip_c) if args.clip_c > 0 else None
    cb = calibrate(block, calib, qconfig, rconfig, clip, use_fsbr=not args.no_fsbr)
    rec = cb.reconstruction
    summary = {"qconfig": qconfig.name, "clip_c": None if clip is None else clip.value,
               "seed": seed, "out": args.out}
    if rec is not None:
        summary.update(initial_loss=rec.initial_loss, final_loss=rec.final_loss,
                       fallback_sites=[s.value for s in rec.fallback_sites])
        if not rec.final_loss < rec.initial_loss:
            log.warning("reconstruction did not improve; writing identity smoothing")
    save_calibrated(args.out, cb, {"prng": prng_record(seed), "source_model": str(args.model)})
    _emit(summary)
    return EXIT_OK


def _run_checked(cb, x, granularity, trace):
    if not trace:
        return int_forward(cb, x, granularity=granularity), None
    with trace_float() as tr:
        y = int_forward(cb, x, granularity=granularity)
    if tr.float_ops:
        raise IntegerPurityError(f"float arithmetic inside the integer region: {tr.violations[:5]}")
    return y, {"integer_calls": tr.integer_calls, "float_ops": tr.float_ops}


def cmd_run(args):
    cb = load_calibrated(args.calibrated)
    x, _ = load_data(args.input)
    granularity = Granularity(args.granularity)
    y, trace = _run_checked(cb, x, granularity, args.trace_float)
    if args.out:
        save_data(args.out, _f32(y), {"source": str(args.input)})
    summary = {"clip_c": None if cb.clip is None else cb.clip.value,
               "qconfig": cb.qconfig.name, "shape": list(y.shape), "granularity": granularity.value,
               "out": args.out}
    if trace is not None:
        summary["trace"] = trace
    _emit(summary)
    return EXIT_OK


def cmd_compare(args):
    seed = resolve_seed(args.seed)
    started = time.perf_counter()
    block, _ = load_block(args.model)
    cb = load_calibrated(args.calibrated)
    x, _ = load_data(args.eval)
    granularity = Granularity(args.granularity)
    ref = float_forward(block, x)
    y, _ = _run_checked(cb, x, granularity, args.trace_float)
    report = ErrorReport(
        qconfig=cb.qconfig.name, clip_c=None if cb.clip is None else cb.clip.value, seed=seed,
        granularity=granularity.value, end_to_end=error_metrics(y, ref),
        per_op=per_op_errors(block, cb, x),
    )
    for name in args.ablate:
        if name == "fsbr":
            if not args.calib:
                raise ValueError("--ablate fsbr needs --calib to recalibrate without smoothing")
            calib, _ = load_data(args.calib)
            rconfig = ReconstructionConfig(samples=args.samples)
            plain = calibrate(block, calib, cb.qconfig, rconfig, cb.clip, use_fsbr=False)
            y_abl = int_forward(plain, x, granularity=granularity)
        else:
            y_abl = int_forward(cb, x, granularity=granularity, ablate=[name])
        report.ablations[name] = error_metrics(y_abl, ref)
    if args.sweep_c:
        report.sweep_c = sweep_clip(block, cb, x, args.sweep_c, granularity, seed)
    if args.timing:
        report.runtime_s = round(time.perf_counter() - started, 3)
    report.check_finite()
    text = report.to_markdown() if args.markdown else report.to_json()
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest(resolve_seed(args.seed))
    _emit(results)
    return EXIT_OK if all(r["passed"] for r in results["checks"]) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iqkernel", description="Integer-only block inference toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate a toy block with calibration and eval data")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--d-ffn", type=int, default=172)
    g.add_argument("--tokens", type=int, default=16)
    g.add_argument("--calib-rows", type=int, default=128)
    g.add_argument("--eval-rows", type=int, default=16)
    g.add_argument("--outlier-channel", type=_outlier, action="append", default=[],
                   metavar="CH:MULT")
    g.add_argument("--outlier-token", type=_outlier, action="append", default=[],
                   metavar="TOK:MULT")
    g.set_defaults(func=cmd_gen_toy)

    def bits(q):
        q.add_argument("--wbits", type=int, choices=(4, 6, 8), default=8)
        q.add_argument("--abits", type=int, choices=(4, 6, 8), default=8)

    c = sub.add_parser("calibrate", help="learn smoothing and quantize the block")
    c.add_argument("--model", required=True)
    c.add_argument("--calib", required=True)
    c.add_argument("--out", required=True)
    bits(c)
    c.add_argument("--clip-c", type=int, default=15, help="softmax clip length; 0 disables")
    c.add_argument("--lr", type=float, default=5e-3)
    c.add_argument("--samples", type=int, default=128)
    c.add_argument("--steps", type=int, default=200)
    c.add_argument("--epsilon", type=float, default=0.05)
    c.add_argument("--warm-start", action="store_true")
    c.add_argument("--no-fsbr", action="store_true")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_calibrate)

    def run_opts(q):
        q.add_argument("--granularity", choices=("per-tensor", "per-token"), default="per-token")
        q.add_argument("--trace-float", action="store_true")

    r = sub.add_parser("run", help="run the integer block on an input file")
    r.add_argument("--calibrated", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--out")
    run_opts(r)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("compare", help="integer vs float error report")
    m.add_argument("--model", required=True)
    m.add_argument("--calibrated", required=True)
    m.add_argument("--eval", required=True)
    m.add_argument("--calib", help="needed by --ablate fsbr")
    m.add_argument("--samples", type=int, default=128)
    m.add_argument("--ablate", choices=ABLATIONS, action="append", default=[])
    m.add_argument("--sweep-c", type=float, nargs="+")
    m.add_argument("--markdown", action="store_true")
    m.add_argument("--report", help="also write the JSON report here")
    m.add_argument("--timing", action="store_true", help="record wall-clock runtime")
    m.add_argument("--seed", type=int)
    run_opts(m)
    m.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", help="quick built-in numerical checks")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OverflowError, ZeroDivisionError, FloatingPointError, ReconstructionError,
            IntegerPurityError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
