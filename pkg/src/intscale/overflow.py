"""Static worst-case bound on the integer-scaled accumulation vs. observed maxima."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from intscale.errors import ParameterError
from intscale.integer_scale import IntegerScaleSet

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class OverflowReport:
    static_bound: int
    observed_max: int = 0
    headroom_bits: float = 0.0
    safe: bool = True

    def __post_init__(self):
        if self.observed_max > self.static_bound:
            raise ParameterError(
                f"observed accumulator {self.observed_max} exceeds static bound {self.static_bound}"
            )

    def to_dict(self) -> dict:
        return {
            "static_bound": self.static_bound,
            "observed_max": self.observed_max,
            "headroom_bits": self.headroom_bits,
            "safe": self.safe,
        }


def overflow_analyzer(
    k: int,
    group_size: int,
    act_bits: int,
    weight_bits: int,
    int_scales,
    observed_max: int = 0,
) -> OverflowReport:
    """Bound ``|sum_g P_g * int_scale_g|`` by ``sum_g g * A_max * W_max * int_scale_g``.

    ``A_max = 2**(a-1) - 1`` is the largest activation code produced by
    max-based symmetric quantization, ``W_max = 2**(w-1)`` the most negative
    weight code. ``int_scales`` may cover several channels laid out
    channel-major; the bound is the worst channel.
    """
    if act_bits < 2 or weight_bits < 2:
        raise ParameterError("bit widths must be >= 2")
    if group_size < 1 or k % group_size:
        raise ParameterError(f"group_size {group_size} does not divide K={k}")
    if not isinstance(int_scales, IntegerScaleSet):
        int_scales = IntegerScaleSet(np.asarray(int_scales), amplifier=1)
    groups = k // group_size
    ints = int_scales.int_scales.astype(np.int64).ravel()
    if ints.size % groups:
        raise ParameterError(f"{ints.size} integer scales cannot be split into {groups} groups")
    per_channel = ints.reshape(-1, groups).sum(axis=1)
    a_max = 2 ** (act_bits - 1) - 1
    w_max = 2 ** (weight_bits - 1)
    bound = group_size * a_max * w_max * int(per_channel.max())
    return OverflowReport(
        static_bound=bound,
        observed_max=int(observed_max),
        headroom_bits=math.log2(INT32_MAX) - math.log2(bound),
        safe=bound <= INT32_MAX,
    )


def report_for_result(result, act_bits: int = 8, weight_bits: int = 4) -> OverflowReport:
    """Pair an executed GEMM's observed accumulator maximum with its static bound.

    The float-scale path only holds one group product in an integer register,
    the coarse path one full-K product; the integer-scale path holds the
    scaled running sum.
    """
    from intscale.gemm import COARSE, FLOAT_SCALE, INTEGER_SCALE

    observed = int(result.stats.max_abs_accumulator)
    if result.path == INTEGER_SCALE:
        return overflow_analyzer(
            result.k, result.group_size, act_bits, weight_bits, result.int_scales, observed
        )
    if result.path == FLOAT_SCALE:
        g = result.group_size
        return overflow_analyzer(g, g, act_bits, weight_bits, [1], observed)
    if result.path == COARSE:
        return overflow_analyzer(result.k, result.k, act_bits, weight_bits, [1], observed)
    raise ParameterError(f"no integer accumulator to bound on path {result.path!r}")
