"""Instrumented W4A8 GEMM under four dequantization strategies.

Operands: activations ``Xq`` are ``M x K`` 8-bit symmetric per-token codes,
weights ``Wq`` are ``K x N`` 4-bit symmetric codes with per-channel or
group-wise scales. For every output element and group ``g`` the engine forms
the integer partial product ``P_g = sum_k X[m, k] * W[k, n]`` over the rows
of that group, then:

``float_scale``    ``O = s_a * sum_g float(P_g) * s_g``
                   one int->float conversion per (output, group)
``integer_scale``  ``O = s_a * float(sum_g P_g * round(s_g * alpha)) / alpha``
                   integer accumulation, one conversion per output
``coarse``         a single group spanning K (per-channel weights)
``dual_quant``     weights rebuilt as ``(W4 - z) * s`` from an asymmetric
                   4-bit code of an 8-bit per-channel weight, then multiplied

Real-valued work is done in float64 and rounded once to float32 at the end.
Integer accumulation is exact in int64; a value leaving the signed 32-bit
window marks the result as overflowed (or raises in strict mode).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from intscale.errors import AccumulatorOverflowError, DimensionError, ParameterError
from intscale.integer_scale import (
    IntegerScaleSet,
    check_amplifier,
    integerize_scales,
    search_amplifier,
)
from intscale.quantizer import (
    ASYMMETRIC,
    SYMMETRIC,
    Granularity,
    QuantizedTensor,
    quantize,
)
from intscale.tensor_io import FloatTensor

FLOAT_SCALE = "float_scale"
INTEGER_SCALE = "integer_scale"
COARSE = "coarse"
DUAL_QUANT = "dual_quant"
PATH_KINDS = (FLOAT_SCALE, INTEGER_SCALE, COARSE, DUAL_QUANT)

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

STRICT = "strict"
PERMISSIVE = "permissive"

FALLBACK_NONE = "none"
FALLBACK_FLOAT = "float_scale_on_overflow_risk"


@dataclass(frozen=True)
class GemmPath:
    """Which kernel to run. ``amplifier=None`` means heuristic search."""

    kind: str
    amplifier: Optional[int] = None
    group_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ParameterError(f"unknown path {self.kind!r}; expected one of {PATH_KINDS}")
        if self.amplifier is not None:
            if self.kind != INTEGER_SCALE:
                raise ParameterError("amplifier only applies to the integer_scale path")
            check_amplifier(self.amplifier)
        if self.group_size is not None and self.group_size < 1:
            raise ParameterError(f"group_size must be >= 1, got {self.group_size}")


@dataclass
class KernelStats:
    int_to_float_conversions: int = 0
    integer_multiply_adds: int = 0
    max_abs_accumulator: int = 0
    overflow_detected: bool = False
    elementwise_multiplies: int = 0
    elementwise_subtractions: int = 0
    substituted_from: Optional[str] = None
    wall_time: float = 0.0  # seconds, informational


@dataclass(frozen=True, eq=False)
class DualQuantWeight:
    """Two-level weight: 8-bit per-channel outer scales over asymmetric 4-bit group codes."""

    outer_scales: np.ndarray
    inner: QuantizedTensor

    def __post_init__(self):
        p = self.inner.params
        if p.bit_width != 4 or p.scheme != ASYMMETRIC:
            raise ParameterError("dual_quant inner stage must be 4-bit asymmetric")
        if p.granularity.kind not in ("group", "per_channel"):
            raise ParameterError("dual_quant inner stage must be group-wise or per-channel")
        outer = np.asarray(self.outer_scales, dtype=np.float32).ravel()
        if outer.size != self.inner.cols or not np.all(outer > 0):
            raise ParameterError("need one positive outer scale per output channel")
        outer.setflags(write=False)
        object.__setattr__(self, "outer_scales", outer)

    @property
    def rows(self) -> int:
        return self.inner.rows

    @property
    def cols(self) -> int:
        return self.inner.cols


def dual_quantize(w: FloatTensor, group_size: int) -> DualQuantWeight:
    """8-bit symmetric per-channel, then 4-bit asymmetric group-wise over the 8-bit codes."""
    outer = quantize(w, 8, SYMMETRIC, Granularity("per_channel"))
    codes = FloatTensor(w.rows, w.cols, outer.values.astype(np.float64))
    inner = quantize(codes, 4, ASYMMETRIC, Granularity.group(group_size))
    return DualQuantWeight(outer.params.scales, inner)


@dataclass(eq=False)
class GemmResult:
    output: FloatTensor
    stats: KernelStats
    path: str
    m: int
    n: int
    k: int
    group_size: int
    amplifier: Optional[int] = None
    int_scales: Optional[IntegerScaleSet] = None
    partials: Optional[np.ndarray] = None  # (M, N, G) int64 when recorded
    accumulators: Optional[np.ndarray] = None  # path-specific integer accumulators

    def to_record(self, timing: bool = True) -> dict:
        rec = {
            "path": self.path,
            "M": self.m,
            "N": self.n,
            "K": self.k,
            "group": self.group_size,
            "conversions": self.stats.int_to_float_conversions,
            "imads": self.stats.integer_multiply_adds,
            "max_abs_acc": int(self.stats.max_abs_accumulator),
            "overflow": bool(self.stats.overflow_detected),
        }
        if self.stats.substituted_from is not None:
            rec["substituted_from"] = self.stats.substituted_from
        if timing:
            rec["wall_ms"] = self.stats.wall_time * 1e3
        return rec


# -- validation ---------------------------------------------------------------


def _check_activations(xq: QuantizedTensor) -> None:
    p = xq.params
    if p.bit_width != 8 or p.scheme != SYMMETRIC or p.granularity.kind != "per_token":
        raise ParameterError("activations must be 8-bit symmetric per-token")
    # -128 would escape the static overflow bound, which assumes |A| <= 127
    if xq.values.size and int(xq.values.min()) < -(2 ** (p.bit_width - 1) - 1):
        raise ParameterError("activation codes must lie in [-127, 127]")


def _weight_groups(wq: QuantizedTensor) -> int:
    """Group size of a symmetric weight; per-channel counts as one group of K."""
    p = wq.params
    if p.scheme != SYMMETRIC:
        raise ParameterError("float/integer/coarse paths take symmetric weights")
    if p.granularity.kind == "group":
        return p.granularity.group_size
    if p.granularity.kind == "per_channel":
        return wq.rows
    raise ParameterError(f"weights must be per-channel or group-wise, not {p.granularity.kind}")


def _check_shapes(xq: QuantizedTensor, w) -> None:
    if xq.cols != w.rows:
        raise DimensionError(f"activation K={xq.cols} does not match weight K={w.rows}")


# -- integer core ---------------------------------------------------------------


def group_partials(xv: np.ndarray, wv: np.ndarray, group_size: int) -> np.ndarray:
    """Exact ``P[m, n, g]`` as int64.

    The batched product runs in float64, which is exact here: operands are at
    most 8-bit and partial sums stay far below 2**53.
    """
    m, k = xv.shape
    n = wv.shape[1]
    groups = k // group_size
    xs = xv.reshape(m, groups, group_size).transpose(1, 0, 2).astype(np.float64)
    ws = wv.reshape(groups, group_size, n).astype(np.float64)
    p = np.matmul(xs, ws)  # (G, m, n)
    return np.rint(p).astype(np.int64).transpose(1, 2, 0)


def _first_overflow(windows: np.ndarray) -> Optional[tuple[int, int, int]]:
    """First (row, col, value) in row-major order whose window left int32."""
    bad = (windows < INT32_MIN) | (windows > INT32_MAX)
    if windows.ndim == 3:
        bad_rc = bad.any(axis=2)
    else:
        bad_rc = bad
    if not bad_rc.any():
        return None
    r, c = map(int, np.argwhere(bad_rc)[0])
    vals = windows[r, c].ravel() if windows.ndim == 3 else np.array([windows[r, c]])
    offending = vals[(vals < INT32_MIN) | (vals > INT32_MAX)][0]
    return r, c, int(offending)


@dataclass
class _Block:
    out: np.ndarray
    conversions: int
    imads: int
    max_abs: int
    overflow: Optional[tuple[int, int, int]]
    partials: Optional[np.ndarray]
    accumulators: Optional[np.ndarray]


def _float_block(xv, sa, wv, ws, g, record) -> _Block:
    p = group_partials(xv, wv, g)
    m, n, groups = p.shape
    acc = np.zeros((m, n))
    for j in range(groups):  # C' += float(C_j) * s_j
        acc += p[:, :, j].astype(np.float64) * ws[None, :, j]
    out = acc * sa[:, None]
    return _Block(
        out=out,
        conversions=m * n * groups,
        imads=m * n * xv.shape[1],
        max_abs=int(np.abs(p).max(initial=0)),
        overflow=_first_overflow(p),
        partials=p if record else None,
        accumulators=p if record else None,
    )


def _integer_block(xv, sa, wv, ints, alpha, g, record) -> _Block:
    p = group_partials(xv, wv, g)
    m, n, groups = p.shape
    running = np.cumsum(p * ints[None, :, :], axis=2)  # C'' += C_j * s_j^INT
    acc = running[:, :, -1]
    windows = np.concatenate([p, running], axis=2)
    out = (acc.astype(np.float64) / alpha) * sa[:, None]
    return _Block(
        out=out,
        conversions=m * n,
        imads=m * n * xv.shape[1] + m * n * groups,
        max_abs=int(np.abs(windows).max(initial=0)),
        overflow=_first_overflow(windows),
        partials=p if record else None,
        accumulators=acc if record else None,
    )


def _coarse_block(xv, sa, wv, ws, record) -> _Block:
    p = group_partials(xv, wv, xv.shape[1])[:, :, 0]
    m, n = p.shape
    out = (p.astype(np.float64) * ws[None, :, 0]) * sa[:, None]
    return _Block(
        out=out,
        conversions=m * n,
        imads=m * n * xv.shape[1],
        max_abs=int(np.abs(p).max(initial=0)),
        overflow=_first_overflow(p),
        partials=p[:, :, None] if record else None,
        accumulators=p if record else None,
    )


def _dual_block(xv, sa, recon, outer, record) -> _Block:
    m, k = xv.shape
    acc = xv.astype(np.float64) @ recon  # C += A * ((W - z) * s)
    out = (acc * outer[None, :]) * sa[:, None]
    return _Block(
        out=out,
        conversions=m * k,  # activation codes enter real arithmetic
        imads=0,
        max_abs=0,
        overflow=None,
        partials=None,
        accumulators=None,
    )


def _run_blocks(xq: QuantizedTensor, block_fn, workers: int) -> tuple[np.ndarray, list[_Block]]:
    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    xv = xq.values
    sa = xq.params.scales.astype(np.float64)
    bounds = np.array_split(np.arange(xq.rows), min(workers, xq.rows))
    spans = [(int(b[0]), int(b[-1]) + 1) for b in bounds if b.size]

    def job(span):
        lo, hi = span
        return block_fn(xv[lo:hi], sa[lo:hi])

    if len(spans) == 1:
        blocks = [job(spans[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            blocks = list(pool.map(job, spans))
    return np.array([s[0] for s in spans]), blocks


def _assemble(
    xq, n, k, g, path, blocks, starts, overflow_mode, t0, extra_conversions=0
) -> GemmResult:
    stats = KernelStats(
        int_to_float_conversions=sum(b.conversions for b in blocks) + extra_conversions,
        integer_multiply_adds=sum(b.imads for b in blocks),
        max_abs_accumulator=max(b.max_abs for b in blocks),
    )
    first = None
    for start, b in zip(starts, blocks):
        if b.overflow is not None:
            r, c, v = b.overflow
            first = (r + int(start), c, v)
            break
    stats.overflow_detected = first is not None
    if first is not None and overflow_mode == STRICT:
        raise AccumulatorOverflowError(*first)
    out = np.vstack([b.out for b in blocks]).astype(np.float32)
    record = blocks[0].partials is not None
    stats.wall_time = time.perf_counter() - t0
    return GemmResult(
        output=FloatTensor(xq.rows, n, out),
        stats=stats,
        path=path,
        m=xq.rows,
        n=n,
        k=k,
        group_size=g,
        partials=np.concatenate([b.partials for b in blocks]) if record else None,
        accumulators=(
            np.concatenate([b.accumulators for b in blocks])
            if blocks[0].accumulators is not None
            else None
        ),
    )


def _check_mode(overflow_mode: str) -> None:
    if overflow_mode not in (STRICT, PERMISSIVE):
        raise ParameterError(f"overflow mode must be strict or permissive, got {overflow_mode!r}")


# -- public paths -------------------------------------------------------------


def gemm_float_scale(
    xq: QuantizedTensor,
    wq: QuantizedTensor,
    *,
    overflow: str = PERMISSIVE,
    workers: int = 1,
    record_partials: bool = False,
) -> GemmResult:
    t0 = time.perf_counter()
    _check_mode(overflow)
    _check_activations(xq)
    _check_shapes(xq, wq)
    g = _weight_groups(wq)
    ws = wq.group_scales().astype(np.float64)
    wv = wq.values
    starts, blocks = _run_blocks(
        xq, lambda xv, sa: _float_block(xv, sa, wv, ws, g, record_partials), workers
    )
    return _assemble(xq, wq.cols, wq.rows, g, FLOAT_SCALE, blocks, starts, overflow, t0)


def resolve_integer_scales(wq: QuantizedTensor, amplifier: Optional[int]) -> IntegerScaleSet:
    """Integer scales for a weight: fixed amplifier, or heuristic search when None."""
    alpha = search_amplifier(wq.params.scales) if amplifier is None else amplifier
    return integerize_scales(wq.params.scales, alpha)


def gemm_integer_scale(
    xq: QuantizedTensor,
    wq: QuantizedTensor,
    int_scales: IntegerScaleSet,
    *,
    overflow: str = PERMISSIVE,
    workers: int = 1,
    record_partials: bool = False,
) -> GemmResult:
    t0 = time.perf_counter()
    _check_mode(overflow)
    _check_activations(xq)
    _check_shapes(xq, wq)
    g = _weight_groups(wq)
    groups = wq.rows // g
    if int_scales.int_scales.size != wq.cols * groups:
        raise DimensionError(
            f"{int_scales.int_scales.size} integer scales for {wq.cols} channels x {groups} groups"
        )
    ints = int_scales.int_scales.reshape(wq.cols, groups).astype(np.int64)
    alpha = int_scales.amplifier
    wv = wq.values
    starts, blocks = _run_blocks(
        xq, lambda xv, sa: _integer_block(xv, sa, wv, ints, alpha, g, record_partials), workers
    )
    res = _assemble(xq, wq.cols, wq.rows, g, INTEGER_SCALE, blocks, starts, overflow, t0)
    res.amplifier = alpha
    res.int_scales = int_scales
    return res


def gemm_coarse(
    xq: QuantizedTensor,
    wq: QuantizedTensor,
    *,
    overflow: str = PERMISSIVE,
    workers: int = 1,
    record_partials: bool = False,
) -> GemmResult:
    t0 = time.perf_counter()
    _check_mode(overflow)
    _check_activations(xq)
    _check_shapes(xq, wq)
    if _weight_groups(wq) != wq.rows:
        raise ParameterError("coarse path needs per-channel weights (or a single group spanning K)")
    ws = wq.group_scales().astype(np.float64)
    wv = wq.values
    starts, blocks = _run_blocks(
        xq, lambda xv, sa: _coarse_block(xv, sa, wv, ws, record_partials), workers
    )
    return _assemble(xq, wq.cols, wq.rows, wq.rows, COARSE, blocks, starts, overflow, t0)


def dual_reconstruct(w: DualQuantWeight) -> np.ndarray:
    """Inner stage ``(W4 - z) * s`` as a ``K x N`` float64 matrix (exact)."""
    inner = w.inner
    return (inner.values - inner.governing_zero_points()).astype(np.float64) * inner.governing_scales()


def gemm_dual_quant(
    xq: QuantizedTensor,
    w: DualQuantWeight,
    *,
    workers: int = 1,
) -> GemmResult:
    t0 = time.perf_counter()
    _check_activations(xq)
    _check_shapes(xq, w)
    recon = dual_reconstruct(w)
    outer = w.outer_scales.astype(np.float64)
    gran = w.inner.params.granularity
    g = gran.group_size if gran.kind == "group" else w.rows
    starts, blocks = _run_blocks(xq, lambda xv, sa: _dual_block(xv, sa, recon, outer, False), workers)
    # the weight rebuild happens once per GEMM: one conversion, one subtraction
    # and one multiply per weight element
    kn = w.rows * w.cols
    res = _assemble(xq, w.cols, w.rows, g, DUAL_QUANT, blocks, starts, PERMISSIVE, t0, extra_conversions=kn)
    res.stats.elementwise_subtractions = kn
    res.stats.elementwise_multiplies = kn
    return res


# -- reference ----------------------------------------------------------------


def round_to_f32(value: Fraction) -> np.float32:
    """Correctly rounded (ties-to-even) float32 of an exact rational."""
    if value == 0:
        return np.float32(0.0)
    approx = np.float32(float(value))
    cands = [np.nextafter(approx, np.float32(-np.inf)), approx, np.nextafter(approx, np.float32(np.inf))]
    best, best_err = None, None
    for c in cands:
        if not np.isfinite(c):
            continue
        err = abs(Fraction(float(c)) - value)
        if best is None or err < best_err or (
            err == best_err and int(np.array(c).view(np.uint32)) % 2 == 0
        ):
            best, best_err = c, err
    return np.float32(best)


def _oracle_eval(xq: QuantizedTensor, w, path: GemmPath, int_scales: Optional[IntegerScaleSet]):
    _check_activations(xq)
    _check_shapes(xq, w)
    m, k = xq.shape
    n = w.cols
    x = [[int(v) for v in row] for row in xq.values]
    sa = [Fraction(float(s)) for s in xq.params.scales]
    out = np.zeros((m, n), dtype=np.float32)

    if path.kind == DUAL_QUANT:
        if not isinstance(w, DualQuantWeight):
            raise ParameterError("dual_quant oracle needs a DualQuantWeight")
        codes = w.inner.values
        zp = w.inner.governing_zero_points()
        sc = w.inner.governing_scales()
        recon = [
            [(int(codes[r, c]) - int(zp[r, c])) * Fraction(float(sc[r, c])) for c in range(n)]
            for r in range(k)
        ]
        outer = [Fraction(float(s)) for s in w.outer_scales]
        for i in range(m):
            for j in range(n):
                acc = sum((x[i][r] * recon[r][j] for r in range(k)), Fraction(0))
                out[i, j] = round_to_f32(sa[i] * outer[j] * acc)
        return FloatTensor(m, n, out), None

    g = _weight_groups(w)
    if path.kind == COARSE:
        if g != k:
            raise ParameterError("coarse path needs per-channel weights")
    groups = k // g
    wv = [[int(v) for v in row] for row in w.values]
    scales = [[Fraction(float(s)) for s in row] for row in w.group_scales()]
    if path.kind == INTEGER_SCALE:
        if int_scales is None:
            int_scales = resolve_integer_scales(w, path.amplifier)
        ints = [[int(v) for v in row] for row in int_scales.int_scales.reshape(n, groups)]
        alpha = int_scales.amplifier
    accs = np.empty((m, n, groups) if path.kind == FLOAT_SCALE else (m, n), dtype=object)

    for i in range(m):
        for j in range(n):
            parts = [
                sum(x[i][r] * wv[r][j] for r in range(q * g, (q + 1) * g)) for q in range(groups)
            ]
            if path.kind == FLOAT_SCALE:
                accs[i, j, :] = parts
                real = sum((p * s for p, s in zip(parts, scales[j])), Fraction(0))
                out[i, j] = round_to_f32(sa[i] * real)
            elif path.kind == INTEGER_SCALE:
                acc = sum(p * s for p, s in zip(parts, ints[j]))
                accs[i, j] = acc
                out[i, j] = round_to_f32(sa[i] * Fraction(acc, alpha))
            else:
                acc = parts[0]
                accs[i, j] = acc
                out[i, j] = round_to_f32(sa[i] * acc * scales[j][0])
    return FloatTensor(m, n, out), accs


def gemm_oracle(
    xq: QuantizedTensor,
    w,
    path: GemmPath,
    int_scales: Optional[IntegerScaleSet] = None,
) -> FloatTensor:
    """Element-by-element reference: unbounded integers, exact rationals, one final rounding."""
    return _oracle_eval(xq, w, path, int_scales)[0]


def oracle_accumulators(
    xq: QuantizedTensor,
    w,
    path: GemmPath,
    int_scales: Optional[IntegerScaleSet] = None,
) -> Optional[np.ndarray]:
    """Integer accumulators of the reference: ``P_g`` per group (float_scale), the
    scaled sum (integer_scale) or the full-K sum (coarse). None for dual_quant."""
    return _oracle_eval(xq, w, path, int_scales)[1]


# -- per-layer selection --------------------------------------------------------


def run_layer(
    xq: QuantizedTensor,
    w: Union[QuantizedTensor, DualQuantWeight],
    path: GemmPath,
    fallback: str = FALLBACK_NONE,
    *,
    int_scales: Optional[IntegerScaleSet] = None,
    overflow: str = PERMISSIVE,
    workers: int = 1,
) -> GemmResult:
    """Run one layer, dropping to the float-scale kernel when the static
    overflow bound of the integer-scale accumulation exceeds int32."""
    from intscale.overflow import overflow_analyzer

    if fallback == "auto":
        fallback = FALLBACK_FLOAT
    if fallback not in (FALLBACK_NONE, FALLBACK_FLOAT):
        raise ParameterError(f"unknown fallback {fallback!r}")
    if path.kind == FLOAT_SCALE:
        return gemm_float_scale(xq, w, overflow=overflow, workers=workers)
    if path.kind == COARSE:
        return gemm_coarse(xq, w, overflow=overflow, workers=workers)
    if path.kind == DUAL_QUANT:
        return gemm_dual_quant(xq, w, workers=workers)

    if int_scales is None:
        int_scales = resolve_integer_scales(w, path.amplifier)
    if fallback == FALLBACK_FLOAT:
        g = _weight_groups(w)
        report = overflow_analyzer(w.rows, g, xq.params.bit_width, w.params.bit_width, int_scales)
        if not report.safe:
            res = gemm_float_scale(xq, w, overflow=overflow, workers=workers)
            res.stats.substituted_from = INTEGER_SCALE
            return res
    return gemm_integer_scale(xq, w, int_scales, overflow=overflow, workers=workers)
