"""Integer scales: amplifier search, integerization and scale statistics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from intscale.errors import ParameterError, ScaleOverflowError
from intscale.quantizer import (
    SYMMETRIC,
    Granularity,
    QuantizedTensor,
    quantize,
    reconstruction_mse,
    round_half_away,
)
from intscale.tensor_io import FloatTensor

DEFAULT_AMPLIFIER = 1024
INT32_MAX = 2**31 - 1


def is_power_of_two(value) -> bool:
    return isinstance(value, (int, np.integer)) and value >= 1 and (int(value) & (int(value) - 1)) == 0


def check_amplifier(amplifier) -> int:
    if not is_power_of_two(amplifier):
        raise ParameterError(f"amplifier must be a power of two >= 1, got {amplifier!r}")
    return int(amplifier)


def default_amplifier(override: Optional[int] = None) -> int:
    """1024 unless a power-of-two override is supplied."""
    if override is None:
        return DEFAULT_AMPLIFIER
    return check_amplifier(override)


def search_amplifier(scales) -> int:
    """Smallest power of two that lifts the minimum scale to at least 1.

    Doubling from 2**0 reproduces the usual search loop; for a minimum scale
    that is already >= 1 that loop would end at 2**-1, so the result is
    clamped to 1 instead.
    """
    s = np.asarray(scales, dtype=np.float64).ravel()
    if s.size == 0:
        raise ParameterError("cannot search an amplifier for an empty scale set")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ParameterError("scales must be finite and > 0")
    scale_min = float(s.min())
    exponent = 0
    while scale_min * 2.0**exponent < 1:
        exponent += 1
    return 2**exponent


@dataclass(frozen=True, eq=False)
class IntegerScaleSet:
    """``round(s * amplifier)`` per (channel, group), floored at 1."""

    int_scales: np.ndarray
    amplifier: int

    def __post_init__(self):
        check_amplifier(self.amplifier)
        arr = np.asarray(self.int_scales)
        if arr.size == 0:
            raise ParameterError("empty integer scale set")
        if np.any(arr < 1):
            raise ParameterError("integer scales must all be >= 1")
        if np.any(arr > INT32_MAX):
            raise ScaleOverflowError("integer scale exceeds int32")
        arr = arr.astype(np.int32)
        arr.setflags(write=False)
        object.__setattr__(self, "int_scales", arr)
        object.__setattr__(self, "amplifier", int(self.amplifier))

    @property
    def amplifier_exponent(self) -> int:
        return self.amplifier.bit_length() - 1

    def as_float(self) -> np.ndarray:
        """Effective scales ``int_scale / amplifier``."""
        return self.int_scales.astype(np.float64) / self.amplifier


def integerize_scales(float_scales, amplifier: int) -> IntegerScaleSet:
    alpha = check_amplifier(amplifier)
    s = np.asarray(float_scales, dtype=np.float64)
    if s.size == 0 or np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ParameterError("scales must be finite and > 0")
    amplified = round_half_away(s * alpha)  # exact: alpha is a power of two
    if np.any(amplified > INT32_MAX):
        worst = float(s.max())
        raise ScaleOverflowError(
            f"scale {worst!r} x amplifier {alpha} does not fit int32; use a smaller amplifier"
        )
    return IntegerScaleSet(np.maximum(amplified, 1).astype(np.int64), alpha)


def integer_dequantize(q: QuantizedTensor, scales: IntegerScaleSet) -> FloatTensor:
    """Reconstruct symmetric weights with ``int_scale / amplifier`` in place of ``s``."""
    eff = scales.int_scales.reshape(-1).astype(np.float64) / scales.amplifier
    if eff.size != q.params.scales.size:
        raise ParameterError(f"{eff.size} integer scales for {q.params.scales.size} units")
    idx = q.params.granularity.unit_index(q.rows, q.cols)
    return FloatTensor(q.rows, q.cols, q.values.astype(np.float64) * eff[idx])


@dataclass
class ScaleAnalysis:
    bit_shift_histogram: dict[int, int]
    amplified_scale_range: tuple[int, int]
    range_amplifier: int
    mse_vs_amplifier: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bit_shift_histogram": {str(k): v for k, v in sorted(self.bit_shift_histogram.items())},
            "amplified_range": [int(self.amplified_scale_range[0]), int(self.amplified_scale_range[1])],
            "range_amplifier": self.range_amplifier,
            "mse_by_amplifier": {str(k): v for k, v in sorted(self.mse_vs_amplifier.items())},
        }


def analyze_scales(
    weights: Sequence[FloatTensor],
    bit_width: int = 4,
    group_size: int = 128,
    amplifiers: Iterable[int] = (),
    range_amplifier: int = DEFAULT_AMPLIFIER,
) -> ScaleAnalysis:
    """Scale statistics over a list of weight matrices.

    * histogram of the searched amplifier exponent, one count per matrix;
    * min/max of the integer scales at ``range_amplifier``;
    * for each amplifier, MSE between the integer-scale and float-scale
      reconstructions, pooled over every element of every matrix.
    """
    if not weights:
        raise ParameterError("analyze_scales needs at least one weight matrix")
    amplifiers = [check_amplifier(a) for a in amplifiers]
    check_amplifier(range_amplifier)
    gran = Granularity.group(group_size)
    quantized = [quantize(w, bit_width, SYMMETRIC, gran) for w in weights]

    hist: Counter = Counter()
    lo, hi = math.inf, -math.inf
    for q in quantized:
        alpha = search_amplifier(q.params.scales)
        hist[alpha.bit_length() - 1] += 1
        ints = integerize_scales(q.params.scales, range_amplifier).int_scales
        lo, hi = min(lo, int(ints.min())), max(hi, int(ints.max()))

    mse = {}
    total = sum(q.values.size for q in quantized)
    for alpha in amplifiers:
        acc = 0.0
        for q in quantized:
            ref = q.values.astype(np.float64) * q.governing_scales()
            approx = integer_dequantize(q, integerize_scales(q.params.scales, alpha))
            acc += reconstruction_mse(FloatTensor(q.rows, q.cols, ref), approx) * q.values.size
        mse[alpha] = acc / total
    return ScaleAnalysis(dict(hist), (lo, hi), range_amplifier, mse)
