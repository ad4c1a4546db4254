"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 accumulator overflow in strict mode.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from intscale.errors import AccumulatorOverflowError, ScaleOverflowError
from intscale.gemm import (
    COARSE,
    DUAL_QUANT,
    FALLBACK_FLOAT,
    FALLBACK_NONE,
    INTEGER_SCALE,
    GemmPath,
    dual_quantize,
    resolve_integer_scales,
    run_layer,
)
from intscale.integer_scale import (
    DEFAULT_AMPLIFIER,
    analyze_scales,
    check_amplifier,
    search_amplifier,
)
from intscale.overflow import overflow_analyzer, report_for_result
from intscale.quantizer import (
    SYMMETRIC,
    Granularity,
    quantize,
    save_quantized,
)
from intscale.report import render_report, run_ablation, run_bench
from intscale.tensor_io import FloatTensor, generate_synthetic, read_tensor

log = logging.getLogger("intscale")

COMMANDS = ("quantize", "gemm", "search-amplifier", "analyze", "overflow", "bench")
PATHS = ("float-scale", "integer-scale", "coarse", "dual-quant")


class UsageError(Exception):
    pass


def _amplifier(text: str) -> Optional[int]:
    if text == "heuristic":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"amplifier must be an integer or 'heuristic', got {text!r}")
    try:
        return check_amplifier(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="intscale",
        description="Fine-grained group quantization and integer-scale GEMM laboratory.",
    )
    p.add_argument("--command", required=True, choices=COMMANDS)
    p.add_argument("--input", help="QTNS real32 tensor to quantize")
    p.add_argument("--weights", action="append", help="QTNS real32 weight (K x N); repeatable for analyze")
    p.add_argument("--activations", help="QTNS real32 activation (M x K)")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--bits-w", type=int, default=4, choices=(4, 8))
    p.add_argument("--bits-a", type=int, default=8, choices=(4, 8))
    p.add_argument("--scheme", default=SYMMETRIC, choices=("symmetric", "asymmetric"))
    p.add_argument("--granularity", choices=("per_tensor", "per_token", "per_channel", "group"))
    p.add_argument("--group", type=int, default=128)
    p.add_argument("--amplifier", type=_amplifier, default=DEFAULT_AMPLIFIER,
                   help="power of two, or 'heuristic'")
    p.add_argument("--amplifiers", type=_int_list, default=[128, 512, 1024, 4096],
                   help="comma-separated amplifiers for analyze")
    p.add_argument("--path", default="integer-scale", choices=PATHS)
    p.add_argument("--paths", default=",".join(PATHS), help="comma-separated paths for bench")
    p.add_argument("--overflow", default="permissive", choices=("strict", "permissive"))
    p.add_argument("--fallback", default="none", choices=("none", "auto"))
    p.add_argument("--int-scale", type=int, help="overflow: analyze a uniform integer scale only")
    p.add_argument("--layers", type=int, default=4, help="synthetic matrices for analyze")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--format", default="json", choices=("json", "csv", "text", "text-table"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_float(path: str) -> FloatTensor:
    t = read_tensor(path)
    if not isinstance(t, FloatTensor):
        raise UsageError(f"{path}: expected a real32 tensor")
    return t


def _write(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _weights(args) -> FloatTensor:
    if args.weights:
        return _load_float(args.weights[0])
    return generate_synthetic(args.k, args.n, "llama_like", args.seed + 1)


def _activations(args, k: int) -> FloatTensor:
    if args.activations:
        return _load_float(args.activations)
    return generate_synthetic(args.m, k, "gaussian", args.seed)


def cmd_quantize(args) -> int:
    if not args.input or not args.out:
        raise UsageError("quantize needs --input and --out")
    x = _load_float(args.input)
    kind = args.granularity or "group"
    gran = Granularity.group(args.group) if kind == "group" else Granularity(kind)
    q = quantize(x, args.bits_w, args.scheme, gran)
    save_quantized(q, args.out)
    summary = {
        "rows": q.rows,
        "cols": q.cols,
        "bit_width": q.params.bit_width,
        "scheme": q.params.scheme,
        "granularity": gran.kind,
        "group": gran.group_size,
        "scale_count": int(q.params.scales.size),
    }
    sys.stdout.write(json.dumps(summary) + "\n")
    return 0


def cmd_gemm(args) -> int:
    w = _weights(args)
    x = _activations(args, w.rows)
    xq = quantize(x, args.bits_a, SYMMETRIC, Granularity("per_token"))
    kind = args.path.replace("-", "_")
    if kind == DUAL_QUANT:
        wq = dual_quantize(w, args.group)
    elif kind == COARSE:
        wq = quantize(w, args.bits_w, SYMMETRIC, Granularity("per_channel"))
    else:
        wq = quantize(w, args.bits_w, SYMMETRIC, Granularity.group(args.group))
    path = GemmPath(kind, amplifier=args.amplifier if kind == INTEGER_SCALE else None)
    fallback = FALLBACK_FLOAT if args.fallback == "auto" else FALLBACK_NONE
    res = run_layer(xq, wq, path, fallback, overflow=args.overflow, workers=args.workers)
    _write(render_report(res, _fmt(args)), args.out)
    return 0


def cmd_search(args) -> int:
    w = _weights(args)
    q = quantize(w, args.bits_w, SYMMETRIC, Granularity.group(args.group))
    alpha = search_amplifier(q.params.scales)
    rec = {
        "amplifier": alpha,
        "exponent": alpha.bit_length() - 1,
        "scale_min": float(q.params.scales.min()),
        "scale_max": float(q.params.scales.max()),
        "scale_count": int(q.params.scales.size),
    }
    _write(render_report(rec, _fmt(args)), args.out)
    return 0


def cmd_analyze(args) -> int:
    if args.weights:
        weights = [_load_float(p) for p in args.weights]
    else:
        weights = [
            generate_synthetic(args.k, args.n, "llama_like", args.seed + i) for i in range(args.layers)
        ]
    fixed = DEFAULT_AMPLIFIER if args.amplifier is None else args.amplifier
    analysis = analyze_scales(weights, args.bits_w, args.group, args.amplifiers, range_amplifier=fixed)
    rows = run_ablation(weights, args.amplifiers, args.group, args.bits_w)
    fmt = _fmt(args)
    if fmt == "json":
        doc = {"analysis": analysis.to_dict(), "ablation": [r.to_record() for r in rows]}
        text = json.dumps(doc, indent=2) + "\n"
    elif fmt == "csv":
        text = render_report(rows, "csv")
    else:
        hist = [{"bit_shift": int(k), "matrices": v} for k, v in sorted(analysis.bit_shift_histogram.items())]
        lo, hi = analysis.amplified_scale_range
        text = render_report(rows, "text") + "\n" + render_report(hist, "text")
        text += f"\namplified scale range at alpha={analysis.range_amplifier}: [{lo}, {hi}]\n"
    _write(text, args.out)
    return 0


def cmd_overflow(args) -> int:
    if args.int_scale is not None:
        groups = max(args.k // max(args.group, 1), 1)
        report = overflow_analyzer(args.k, args.group, args.bits_a, args.bits_w, [args.int_scale] * groups)
        rec = {"K": args.k, "group": args.group, **report.to_dict()}
    else:
        w = _weights(args)
        x = _activations(args, w.rows)
        xq = quantize(x, args.bits_a, SYMMETRIC, Granularity("per_token"))
        wq = quantize(w, args.bits_w, SYMMETRIC, Granularity.group(args.group))
        ints = resolve_integer_scales(wq, args.amplifier)
        fallback = FALLBACK_FLOAT if args.fallback == "auto" else FALLBACK_NONE
        res = run_layer(xq, wq, GemmPath(INTEGER_SCALE, ints.amplifier), fallback,
                        int_scales=ints, overflow=args.overflow, workers=args.workers)
        if res.path == INTEGER_SCALE:
            report = report_for_result(res, args.bits_a, args.bits_w)
        else:
            # fell back to float scales: report the bound that triggered it
            report = overflow_analyzer(wq.rows, args.group, args.bits_a, args.bits_w, ints)
        rec = {
            "K": wq.rows,
            "group": args.group,
            "amplifier": ints.amplifier,
            "executed_path": res.path,
            **report.to_dict(),
        }
    _write(render_report(rec, _fmt(args)), args.out)
    return 0


def cmd_bench(args) -> int:
    paths = [p.strip() for p in args.paths.split(",") if p.strip()]
    rows = run_bench(
        (args.m, args.k, args.n),
        paths,
        repeats=args.repeats,
        seed=args.seed,
        group_size=args.group,
        amplifier=args.amplifier,
        workers=args.workers,
    )
    _write(render_report(rows, _fmt(args)), args.out)
    return 0


def _fmt(args) -> str:
    return "text" if args.format == "text-table" else args.format


HANDLERS = {
    "quantize": cmd_quantize,
    "gemm": cmd_gemm,
    "search-amplifier": cmd_search,
    "analyze": cmd_analyze,
    "overflow": cmd_overflow,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return HANDLERS[args.command](args)
    except AccumulatorOverflowError as exc:
        log.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except (UsageError, ValueError, ScaleOverflowError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
