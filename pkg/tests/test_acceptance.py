"""Acceptance gate. Each test records one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
import pytest

from conftest import criterion, make_activations, random_instance, ulp_distance
from intscale.errors import AccumulatorOverflowError
from intscale.gemm import (
    COARSE,
    DUAL_QUANT,
    FLOAT_SCALE,
    INTEGER_SCALE,
    DualQuantWeight,
    GemmPath,
    dual_quantize,
    gemm_coarse,
    gemm_dual_quant,
    gemm_float_scale,
    gemm_integer_scale,
    gemm_oracle,
    oracle_accumulators,
    run_layer,
)
from intscale.integer_scale import IntegerScaleSet, integerize_scales, search_amplifier
from intscale.overflow import report_for_result
from intscale.quantizer import Granularity, QuantizedTensor, QuantParams, dequantize, quantize
from intscale.report import render_report, run_ablation, run_bench
from intscale.tensor_io import FloatTensor, generate_synthetic


def brute_force_amplifier(scales) -> int:
    smin = float(np.min(scales))
    for e in range(32):
        if smin * 2**e >= 1:
            return 2**e
    raise AssertionError("no exponent in 0..31 works")


def test_1_exact_agreement_with_dyadic_scales():
    with criterion(1, "integer path equals float path within 1 ULP on 1000 dyadic instances, < 10 s"):
        rng = np.random.default_rng(101)
        cases = [random_instance(rng, 64, scales="dyadic") for _ in range(1000)]
        t0 = time.perf_counter()
        worst = 0
        for xq, wq, alpha in cases:
            ints = integerize_scales(wq.params.scales, alpha)
            # dyadic scales integerize exactly
            assert np.array_equal(ints.int_scales / alpha, wq.params.scales.astype(np.float64))
            f = gemm_float_scale(xq, wq).output.data
            i = gemm_integer_scale(xq, wq, ints).output.data
            worst = max(worst, int(ulp_distance(f, i).max()))
        elapsed = time.perf_counter() - t0
        assert worst <= 1, f"max ULP distance {worst}"
        assert elapsed < 10, f"took {elapsed:.2f} s"


def test_2_bounded_agreement_with_free_scales():
    with criterion(2, "|O_int - O_float| <= s_a * sum|P_g| / (2 alpha) on 1000 instances, alpha = 1024"):
        rng = np.random.default_rng(202)
        alpha = 1024
        violations = 0
        for _ in range(1000):
            xq, wq, _ = random_instance(rng, 64, scales="free")
            ints = integerize_scales(wq.params.scales, alpha)
            f = gemm_float_scale(xq, wq, record_partials=True)
            i = gemm_integer_scale(xq, wq, ints, record_partials=True)
            assert np.array_equal(f.partials, i.partials)
            sa = xq.params.scales.astype(np.float64)[:, None]
            bound = sa * np.abs(f.partials).sum(axis=2) / (2 * alpha)
            diff = np.abs(i.output.data.astype(np.float64) - f.output.data.astype(np.float64))
            violations += int(np.count_nonzero(diff > bound))
        assert violations == 0, f"{violations} elements exceed the bound"


def test_3_conversion_accounting():
    with criterion(3, "conversions 704512 (float) / 22016 (integer); 131072 scales for 4096x4096 at g=128"):
        rng = np.random.default_rng(303)
        m, k, n, g = 1, 4096, 22016, 128
        xq = make_activations(rng.integers(-127, 128, size=(m, k)), [0.01])
        wq = QuantizedTensor(
            rng.integers(-8, 8, size=(k, n)),
            QuantParams(4, "symmetric", np.full(n * (k // g), 0.01), Granularity.group(g)),
            k, n,
        )
        f = gemm_float_scale(xq, wq)
        i = gemm_integer_scale(xq, wq, integerize_scales(wq.params.scales, 1024))
        assert f.stats.int_to_float_conversions == 704_512
        assert i.stats.int_to_float_conversions == 22_016
        w = generate_synthetic(4096, 4096, "gaussian", 0, sigma=0.02)
        assert quantize(w, 4, "symmetric", Granularity.group(128)).params.scales.size == 131_072


def test_4_amplifier_search_equivalence():
    with criterion(4, "search_amplifier equals brute force on 10000 scale sets; min in [2^-10, 2^-9) -> 1024"):
        rng = np.random.default_rng(404)
        clamp_cases = 0
        for _ in range(10_000):
            size = int(rng.integers(1, 33))
            scales = 2.0 ** rng.uniform(-30, 4, size=size)
            if rng.random() < 0.1:
                scales = 1.0 + rng.uniform(0, 8, size=size)
            clamp_cases += bool(scales.min() >= 1)
            assert search_amplifier(scales) == brute_force_amplifier(scales)
        assert clamp_cases > 0
        for _ in range(1000):
            size = int(rng.integers(1, 65))
            scales = 2.0 ** rng.uniform(-9.5, 0, size=size)
            scales[rng.integers(size)] = 2.0 ** rng.uniform(-10, -9)
            assert 2**-10 <= scales.min() < 2**-9
            assert search_amplifier(scales) == 1024


def test_5_amplifier_ablation_trend():
    with criterion(5, "llama_like MSE non-increasing over 512, 1024, 4096 and strictly worse at 128"):
        weights = [generate_synthetic(512, 256, "llama_like", seed) for seed in range(4)]
        rows = run_ablation(weights, [128, 512, 1024, 4096])
        mse = {r.amplifier: r.mse_vs_float for r in rows}
        assert mse[512] >= mse[1024] >= mse[4096]
        assert mse[128] > mse[512]


GRANULARITIES = ["per_tensor", "per_channel", "per_token", "group"]


def test_6_quantizer_error_bound():
    with criterion(6, "|x - deq(q(x))| <= s/2 on 10000 tensors at every granularity; group <= channel scale"):
        rng = np.random.default_rng(606)
        for t in range(10_000):
            g = int(rng.choice([1, 2, 4, 8]))
            k = g * int(rng.integers(1, 5))
            n = int(rng.integers(1, 9))
            sigma = 10.0 ** rng.uniform(-4, 2)
            x = (rng.standard_normal((k, n)) * sigma).astype(np.float32)
            if t % 5 == 0:
                x[rng.integers(k), rng.integers(n)] *= 50  # outlier
            ft = FloatTensor.from_array(x)
            bits = 4 if t % 2 else 8
            gran = GRANULARITIES[t % 4]
            gr = Granularity.group(g) if gran == "group" else Granularity(gran)
            q = quantize(ft, bits, "symmetric", gr)
            err = np.abs(x.astype(np.float64) - dequantize(q).data)
            assert np.all(err <= q.governing_scales().astype(np.float64) / 2)
            grp = quantize(ft, 4, "symmetric", Granularity.group(g)).group_scales()
            chan = quantize(ft, 4, "symmetric", Granularity("per_channel")).params.scales
            assert np.all(grp <= chan[:, None])


def _random_dual(rng, k, n):
    g = k if rng.random() < 0.3 else int(rng.choice([d for d in (1, 2, 4) if k % d == 0]))
    groups = k // g
    inner = QuantizedTensor(
        rng.integers(0, 16, size=(k, n)),
        QuantParams(4, "asymmetric", rng.uniform(0.05, 2, size=n * groups), Granularity.group(g),
                    rng.integers(0, 16, size=n * groups)),
        k, n,
    )
    return DualQuantWeight(rng.uniform(1e-3, 1, size=n), inner)


def test_7_oracle_equivalence():
    with criterion(7, "all four paths match the oracle on 500 instances; dual(z=0, s=1) equals coarse"):
        rng = np.random.default_rng(707)
        for t in range(500):
            kind = (FLOAT_SCALE, INTEGER_SCALE, COARSE, DUAL_QUANT)[t % 4]
            groups = (None,) if kind == COARSE else (1, 2, 4, None)
            xq, wq, _ = random_instance(rng, 12, groups=groups, scales="free")
            if kind == FLOAT_SCALE:
                res = gemm_float_scale(xq, wq, record_partials=True)
                acc = oracle_accumulators(xq, wq, GemmPath(FLOAT_SCALE))
                assert np.array_equal(res.partials, acc.astype(np.int64))
                ref = gemm_oracle(xq, wq, GemmPath(FLOAT_SCALE))
            elif kind == INTEGER_SCALE:
                ints = integerize_scales(wq.params.scales, 2 ** int(rng.integers(0, 14)))
                res = gemm_integer_scale(xq, wq, ints, record_partials=True)
                acc = oracle_accumulators(xq, wq, GemmPath(INTEGER_SCALE), ints)
                assert np.array_equal(res.accumulators, acc.astype(np.int64))
                ref = gemm_oracle(xq, wq, GemmPath(INTEGER_SCALE), ints)
            elif kind == COARSE:
                res = gemm_coarse(xq, wq, record_partials=True)
                acc = oracle_accumulators(xq, wq, GemmPath(COARSE))
                assert np.array_equal(res.accumulators, acc.astype(np.int64))
                ref = gemm_oracle(xq, wq, GemmPath(COARSE))
            else:
                w = _random_dual(rng, xq.cols, wq.cols)
                res = gemm_dual_quant(xq, w)
                ref = gemm_oracle(xq, w, GemmPath(DUAL_QUANT))
            assert np.all(ulp_distance(res.output.data, ref.data) <= 1), kind

        for _ in range(100):
            m, k, n = (int(v) for v in rng.integers(1, 17, size=3))
            codes = rng.integers(0, 16, size=(k, n))
            outer = rng.uniform(1e-3, 1, size=n)
            xq = make_activations(rng.integers(-127, 128, size=(m, k)), rng.uniform(1e-3, 1, size=m))
            dual = DualQuantWeight(outer, QuantizedTensor(
                codes,
                QuantParams(4, "asymmetric", np.ones(n), Granularity("per_channel"), np.zeros(n)),
                k, n,
            ))
            wq = QuantizedTensor(codes, QuantParams(8, "symmetric", outer, Granularity("per_channel")), k, n)
            assert np.array_equal(gemm_dual_quant(xq, dual).output.data, gemm_coarse(xq, wq).output.data)


def test_8_overflow_soundness():
    with criterion(8, "observed <= static bound on every GEMM; strict raises, permissive flags, auto falls back"):
        rng = np.random.default_rng(808)
        executed = 0
        for t in range(600):
            xq, wq, _ = random_instance(rng, 64, groups=(None,) if t % 3 == 2 else (1, 2, 4, None))
            if t % 3 == 0:
                res = gemm_float_scale(xq, wq)
            elif t % 3 == 1:
                res = gemm_integer_scale(xq, wq, integerize_scales(wq.params.scales, 1024))
            else:
                res = gemm_coarse(xq, wq)
            rep = report_for_result(res)
            assert rep.observed_max <= rep.static_bound
            executed += 1
        # saturated operands on a realistic layer
        x = generate_synthetic(8, 4096, "gaussian", 1)
        w = generate_synthetic(4096, 64, "llama_like", 2)
        xq = quantize(x, 8, "symmetric", Granularity("per_token"))
        wq = quantize(w, 4, "symmetric", Granularity.group(128))
        for res in (gemm_float_scale(xq, wq),
                    gemm_integer_scale(xq, wq, integerize_scales(wq.params.scales, 1024))):
            rep = report_for_result(res)
            assert rep.observed_max <= rep.static_bound
            executed += 1
        assert executed == 602

        # adversarial: every code at its extreme, every integer scale at 1024
        k, g, n = 4096, 128, 4
        xq = make_activations(np.full((2, k), 127), np.ones(2))
        wq = QuantizedTensor(
            np.full((k, n), -8),
            QuantParams(4, "symmetric", np.ones(n * (k // g)), Granularity.group(g)),
            k, n,
        )
        ints = IntegerScaleSet(np.full(n * (k // g), 1024), 1024)
        with pytest.raises(AccumulatorOverflowError):
            gemm_integer_scale(xq, wq, ints, overflow="strict")
        flagged = gemm_integer_scale(xq, wq, ints, overflow="permissive")
        assert flagged.stats.overflow_detected
        rep = report_for_result(flagged)
        assert rep.observed_max == rep.static_bound > 2**31 - 1
        sub = run_layer(xq, wq, GemmPath(INTEGER_SCALE, 1024), "auto", int_scales=ints, overflow="strict")
        assert sub.path == FLOAT_SCALE
        assert sub.stats.substituted_from == INTEGER_SCALE
        assert sub.to_record()["substituted_from"] == INTEGER_SCALE
        assert not sub.stats.overflow_detected


def _report_for_workers(workers: int) -> str:
    x = generate_synthetic(37, 512, "gaussian", 9)
    w = generate_synthetic(512, 96, "llama_like", 10)
    xq = quantize(x, 8, "symmetric", Granularity("per_token"))
    wq = quantize(w, 4, "symmetric", Granularity.group(128))
    wc = quantize(w, 4, "symmetric", Granularity("per_channel"))
    ints = integerize_scales(wq.params.scales, 1024)
    results = [
        gemm_float_scale(xq, wq, workers=workers),
        gemm_integer_scale(xq, wq, ints, workers=workers),
        gemm_coarse(xq, wc, workers=workers),
        gemm_dual_quant(xq, dual_quantize(w, 128), workers=workers),
    ]
    outputs = b"".join(r.output.data.tobytes() for r in results)
    bench = run_bench((4, 256, 32), ["float_scale", "integer_scale", "coarse", "dual_quant"],
                      repeats=3, seed=5, workers=workers)
    text = render_report(results, "json", timing=False) + render_report(bench, "csv", timing=False)
    return text + outputs.hex()


def test_9_determinism_across_workers():
    with criterion(9, "byte-identical non-timing reports across 1, 2 and 8 workers"):
        base = _report_for_workers(1)
        assert _report_for_workers(2) == base
        assert _report_for_workers(8) == base
        assert _report_for_workers(1) == base
