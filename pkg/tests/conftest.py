from __future__ import annotations

import contextlib

import numpy as np
import pytest

from intscale.quantizer import Granularity, QuantizedTensor, QuantParams

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion; re-raise on failure."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_LINES.append(f"FAIL  criterion {number}: {title} -- {type(exc).__name__}: {exc}")
        raise
    ACCEPTANCE_LINES.append(f"PASS  criterion {number}: {title}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def ordered_bits(x) -> np.ndarray:
    """Map float32 values onto integers so that adjacent floats differ by 1."""
    i = np.asarray(x, dtype=np.float32).view(np.int32).astype(np.int64)
    return np.where(i < 0, -(i & 0x7FFFFFFF), i)


def ulp_distance(a, b) -> np.ndarray:
    return np.abs(ordered_bits(a) - ordered_bits(b))


def make_activations(codes, scales) -> QuantizedTensor:
    codes = np.asarray(codes)
    return QuantizedTensor(
        codes, QuantParams(8, "symmetric", scales, Granularity("per_token")), *codes.shape
    )


def make_weights(codes, scales, group_size) -> QuantizedTensor:
    """``scales`` laid out ``(N, K // g)``."""
    codes = np.asarray(codes)
    gran = Granularity.group(group_size)
    return QuantizedTensor(
        codes, QuantParams(4, "symmetric", np.asarray(scales).ravel(), gran), *codes.shape
    )


def random_instance(rng: np.random.Generator, max_dim: int = 64, groups=(1, 2, 4, None), scales="free"):
    """Random W4A8 GEMM operands.

    ``scales="dyadic"`` draws every weight scale as ``k / alpha`` exactly and
    returns that alpha; ``"free"`` draws log-uniform scales in ``[2**-10, 4]``.
    """
    g = groups[rng.integers(len(groups))]
    if g is None:
        k = int(rng.integers(1, max_dim + 1))
        g = k
    else:
        k = g * int(rng.integers(1, max_dim // g + 1))
    m = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    x = rng.integers(-127, 128, size=(m, k))
    w = rng.integers(-8, 8, size=(k, n))
    s_a = rng.uniform(1e-3, 1.0, size=m).astype(np.float32)
    if scales == "dyadic":
        alpha = 2 ** int(rng.integers(0, 13))
        numer = rng.integers(1, 2 * alpha + 1, size=(n, k // g))
        s_w = (numer / alpha).astype(np.float32)
    else:
        alpha = None
        s_w = (2.0 ** rng.uniform(-10, 2, size=(n, k // g))).astype(np.float32)
    return make_activations(x, s_a), make_weights(w, s_w, g), alpha


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
