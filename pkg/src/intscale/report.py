"""Amplifier ablation, desk-scale benchmark and report emission."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass
from os import PathLike
from typing import Iterable, Optional, Sequence, Union

from intscale.errors import ParameterError
from intscale.gemm import (
    COARSE,
    DUAL_QUANT,
    FLOAT_SCALE,
    INTEGER_SCALE,
    PATH_KINDS,
    GemmResult,
    dual_quantize,
    gemm_coarse,
    gemm_dual_quant,
    gemm_float_scale,
    gemm_integer_scale,
    resolve_integer_scales,
)
from intscale.integer_scale import check_amplifier, integer_dequantize, integerize_scales
from intscale.quantizer import SYMMETRIC, Granularity, dequantize, quantize, reconstruction_mse
from intscale.tensor_io import FloatTensor, generate_synthetic

FORMATS = ("json", "csv", "text")


@dataclass(frozen=True)
class AblationRow:
    amplifier: int
    mse_vs_float: float
    mse_vs_original: float

    def to_record(self, timing: bool = True) -> dict:
        return asdict(self)


def run_ablation(
    weights: Union[FloatTensor, Sequence[FloatTensor]],
    amplifiers: Iterable[int],
    group_size: int = 128,
    bit_width: int = 4,
) -> list[AblationRow]:
    """One row per amplifier, sorted by amplifier; MSEs pooled over all matrices."""
    if isinstance(weights, FloatTensor):
        weights = [weights]
    if not weights:
        raise ParameterError("run_ablation needs at least one weight matrix")
    amplifiers = sorted(check_amplifier(a) for a in amplifiers)
    if not amplifiers:
        raise ParameterError("amplifier list is empty")

    gran = Granularity.group(group_size)
    quantized = [(w, quantize(w, bit_width, SYMMETRIC, gran)) for w in weights]
    total = sum(w.rows * w.cols for w in weights)
    rows = []
    for alpha in amplifiers:
        vs_float = vs_orig = 0.0
        for w, q in quantized:
            approx = integer_dequantize(q, integerize_scales(q.params.scales, alpha))
            size = w.rows * w.cols
            vs_float += reconstruction_mse(dequantize(q), approx) * size
            vs_orig += reconstruction_mse(w, approx) * size
        rows.append(AblationRow(alpha, vs_float / total, vs_orig / total))
    return rows


@dataclass(frozen=True)
class BenchRow:
    path: str
    M: int
    K: int
    N: int
    group: int
    conversions: int
    expected_conversions: int
    imads: int
    counters_ok: bool
    median_wall_ms: float

    def to_record(self, timing: bool = True) -> dict:
        rec = asdict(self)
        if not timing:
            del rec["median_wall_ms"]
        return rec


def expected_conversions(path: str, m: int, k: int, n: int, group_size: int) -> int:
    if path == FLOAT_SCALE:
        return m * n * (k // group_size)
    if path in (INTEGER_SCALE, COARSE):
        return m * n
    if path == DUAL_QUANT:
        return k * n + m * k
    raise ParameterError(f"unknown path {path!r}")


def expected_imads(path: str, m: int, k: int, n: int, group_size: int) -> int:
    if path in (FLOAT_SCALE, COARSE):
        return m * n * k
    if path == INTEGER_SCALE:
        return m * n * k + m * n * (k // group_size)
    return 0


def run_bench(
    shape: tuple[int, int, int],
    paths: Sequence[str],
    repeats: int = 5,
    seed: int = 0,
    group_size: int = 128,
    amplifier: Optional[int] = 1024,
    workers: int = 1,
) -> list[BenchRow]:
    """Time each path on one random instance; counters are checked, timings are not."""
    if repeats < 3:
        raise ParameterError(f"repeats must be >= 3, got {repeats}")
    paths = [p.replace("-", "_") for p in paths]
    for p in paths:
        if p not in PATH_KINDS:
            raise ParameterError(f"unknown path {p!r}")
    if not paths:
        raise ParameterError("no paths requested")
    m, k, n = shape
    x = generate_synthetic(m, k, "gaussian", seed)
    w = generate_synthetic(k, n, "gaussian", seed + 1, sigma=0.02)
    xq = quantize(x, 8, SYMMETRIC, Granularity("per_token"))

    rows = []
    for path in paths:
        g = k if path == COARSE else group_size
        if path == COARSE:
            wq = quantize(w, 4, SYMMETRIC, Granularity("per_channel"))
            run = lambda: gemm_coarse(xq, wq, workers=workers)
        elif path == FLOAT_SCALE:
            wq = quantize(w, 4, SYMMETRIC, Granularity.group(g))
            run = lambda: gemm_float_scale(xq, wq, workers=workers)
        elif path == INTEGER_SCALE:
            wq = quantize(w, 4, SYMMETRIC, Granularity.group(g))
            ints = resolve_integer_scales(wq, amplifier)
            run = lambda: gemm_integer_scale(xq, wq, ints, workers=workers)
        else:
            dw = dual_quantize(w, g)
            run = lambda: gemm_dual_quant(xq, dw, workers=workers)
        results: list[GemmResult] = [run() for _ in range(repeats)]
        conv = {r.stats.int_to_float_conversions for r in results}
        imads = {r.stats.integer_multiply_adds for r in results}
        want = expected_conversions(path, m, k, n, g)
        ok = conv == {want} and imads == {expected_imads(path, m, k, n, g)}
        rows.append(
            BenchRow(
                path=path,
                M=m,
                K=k,
                N=n,
                group=g,
                conversions=results[0].stats.int_to_float_conversions,
                expected_conversions=want,
                imads=results[0].stats.integer_multiply_adds,
                counters_ok=ok,
                median_wall_ms=statistics.median(r.stats.wall_time for r in results) * 1e3,
            )
        )
    return rows


def _records(results, timing: bool) -> list[dict]:
    out = []
    for r in results:
        if isinstance(r, dict):
            rec = dict(r)
            if not timing:
                rec = {k: v for k, v in rec.items() if not k.endswith("wall_ms")}
            out.append(rec)
        else:
            out.append(r.to_record(timing=timing))
    return out


def render_report(results, fmt: str = "json", timing: bool = True) -> str:
    single = isinstance(results, (GemmResult, AblationRow, BenchRow, dict))
    items = [results] if single else list(results)
    if not items:
        raise ParameterError("nothing to report")
    if fmt not in FORMATS:
        raise ParameterError(f"format must be one of {FORMATS}, got {fmt!r}")
    recs = _records(items, timing)
    if fmt == "json":
        return json.dumps(recs[0] if single else recs, indent=2) + "\n"
    header = list(recs[0].keys())
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for rec in recs:
            writer.writerow({k: _cell(rec.get(k)) for k in header})
        return buf.getvalue()
    cells = [[_cell(rec.get(k)) for k in header] for rec in recs]
    widths = [max(len(h), *(len(row[i]) for row in cells)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def emit_report(
    results,
    fmt: str = "json",
    path: Union[str, PathLike, None] = None,
    timing: bool = True,
) -> str:
    """Render ``results`` and, if ``path`` is given, write them there."""
    text = render_report(results, fmt, timing)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
