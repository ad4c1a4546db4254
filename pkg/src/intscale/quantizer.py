"""Uniform symmetric / asymmetric quantization at several granularities.

Conventions:

* weights are stored ``K x N`` (reduction dimension first); per-channel means
  one scale per column, group-wise splits every column into ``K / group_size``
  contiguous runs of rows;
* activations are ``M x K``; per-token means one scale per row;
* group scales are laid out channel-major: unit ``n * (K // g) + k // g``;
* rounding is to nearest, ties away from zero;
* a unit whose values are all zero gets scale 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike
from typing import Optional, Union

import numpy as np

from intscale.errors import DimensionError, ParameterError
from intscale.tensor_io import (
    DTYPE_SIGNED4,
    DTYPE_SIGNED8,
    FloatTensor,
    QuantizedPayload,
    read_tensor,
    write_tensor,
)

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
KINDS = ("per_tensor", "per_token", "per_channel", "group")
DEFAULT_GROUP_SIZE = 128


def round_half_away(x) -> np.ndarray:
    """Round to nearest, ties away from zero.

    ``floor(|x| + 0.5)`` misrounds 0.49999999999999994, so the fractional
    part is compared instead.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, x)


@dataclass(frozen=True)
class Granularity:
    kind: str
    group_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown granularity {self.kind!r}")
        if self.kind == "group":
            if self.group_size is None or self.group_size < 1:
                raise ParameterError(f"group granularity needs group_size >= 1, got {self.group_size}")
        elif self.group_size is not None:
            raise ParameterError(f"group_size only applies to group granularity, not {self.kind}")

    @classmethod
    def group(cls, size: int = DEFAULT_GROUP_SIZE) -> Granularity:
        return cls("group", size)

    def unit_count(self, rows: int, cols: int) -> int:
        if self.kind == "per_tensor":
            return 1
        if self.kind == "per_token":
            return rows
        if self.kind == "per_channel":
            return cols
        self.check_shape(rows, cols)
        return cols * (rows // self.group_size)

    def check_shape(self, rows: int, cols: int) -> None:
        if self.kind == "group" and rows % self.group_size:
            raise DimensionError(
                f"group_size {self.group_size} does not divide reduction dim {rows}"
            )

    def unit_index(self, rows: int, cols: int) -> np.ndarray:
        """Index into the scale vector for every element, shape ``rows x cols``."""
        r = np.arange(rows)[:, None]
        c = np.arange(cols)[None, :]
        if self.kind == "per_tensor":
            idx = np.zeros((rows, cols), dtype=np.int64)
        elif self.kind == "per_token":
            idx = np.broadcast_to(r, (rows, cols))
        elif self.kind == "per_channel":
            idx = np.broadcast_to(c, (rows, cols))
        else:
            self.check_shape(rows, cols)
            idx = c * (rows // self.group_size) + r // self.group_size
        return np.ascontiguousarray(idx, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "group_size": self.group_size}


def qrange(bit_width: int, scheme: str) -> tuple[int, int]:
    if scheme == SYMMETRIC:
        return -(2 ** (bit_width - 1)), 2 ** (bit_width - 1) - 1
    return 0, 2**bit_width - 1


@dataclass(frozen=True, eq=False)
class QuantParams:
    bit_width: int
    scheme: str
    scales: np.ndarray
    granularity: Granularity
    zero_points: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.bit_width not in (4, 8):
            raise ParameterError(f"bit_width must be 4 or 8, got {self.bit_width}")
        if self.scheme not in (SYMMETRIC, ASYMMETRIC):
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        scales = np.asarray(self.scales, dtype=np.float32).ravel()
        if scales.size == 0 or not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ParameterError("every scale must be finite and > 0")
        scales.setflags(write=False)
        object.__setattr__(self, "scales", scales)
        if self.scheme == ASYMMETRIC:
            if self.zero_points is None:
                raise ParameterError("asymmetric quantization needs zero points")
            zp = np.asarray(self.zero_points, dtype=np.int64).ravel()
            if zp.size != scales.size:
                raise ParameterError(f"{zp.size} zero points for {scales.size} scales")
            zp.setflags(write=False)
            object.__setattr__(self, "zero_points", zp)
        elif self.zero_points is not None:
            raise ParameterError("symmetric quantization takes no zero points")

    @property
    def qmin(self) -> int:
        return qrange(self.bit_width, self.scheme)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bit_width, self.scheme)[1]

    def to_dict(self) -> dict:
        return {
            "bit_width": self.bit_width,
            "scheme": self.scheme,
            "granularity": self.granularity.to_dict(),
            "scales": [float(s) for s in self.scales],
            "zero_points": None if self.zero_points is None else [int(z) for z in self.zero_points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> QuantParams:
        g = d["granularity"]
        return cls(
            bit_width=int(d["bit_width"]),
            scheme=d["scheme"],
            scales=np.asarray(d["scales"], dtype=np.float32),
            granularity=Granularity(g["kind"], g.get("group_size")),
            zero_points=None if d.get("zero_points") is None else np.asarray(d["zero_points"]),
        )


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    values: np.ndarray
    params: QuantParams
    rows: int
    cols: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size != self.rows * self.cols:
            raise DimensionError(f"{values.size} values for a {self.rows}x{self.cols} tensor")
        if not np.issubdtype(values.dtype, np.integer):
            if not np.array_equal(values, np.round(values)):
                raise ParameterError("quantized values must be integers")
        values = values.astype(np.int32).reshape(self.rows, self.cols)
        lo, hi = self.params.qmin, self.params.qmax
        if values.min() < lo or values.max() > hi:
            raise ParameterError(f"quantized values outside [{lo}, {hi}]")
        units = self.params.granularity.unit_count(self.rows, self.cols)
        if self.params.scales.size != units:
            raise ParameterError(
                f"{self.params.scales.size} scales for {units} {self.params.granularity.kind} units"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def governing_scales(self) -> np.ndarray:
        """Scale that applies to every element, ``rows x cols`` float32."""
        return self.params.scales[self.params.granularity.unit_index(self.rows, self.cols)]

    def governing_zero_points(self) -> np.ndarray:
        if self.params.zero_points is None:
            return np.zeros((self.rows, self.cols), dtype=np.int64)
        return self.params.zero_points[self.params.granularity.unit_index(self.rows, self.cols)]

    def group_scales(self) -> np.ndarray:
        """Weight scales as ``(N, K // g)``; per-channel is treated as one group."""
        g = self.params.granularity
        if g.kind == "group":
            return self.params.scales.reshape(self.cols, self.rows // g.group_size)
        if g.kind == "per_channel":
            return self.params.scales.reshape(self.cols, 1)
        raise ParameterError(f"{g.kind} weights have no per-channel group structure")


def _unit_reduce(x: np.ndarray, gran: Granularity, fn) -> np.ndarray:
    rows, cols = x.shape
    if gran.kind == "per_tensor":
        return np.array([fn(x, axis=None)])
    if gran.kind == "per_token":
        return fn(x, axis=1)
    if gran.kind == "per_channel":
        return fn(x, axis=0)
    gran.check_shape(rows, cols)
    n_groups = rows // gran.group_size
    per_group = fn(x.reshape(n_groups, gran.group_size, cols), axis=1)  # (G, N)
    return per_group.T.ravel()


def _to_scale(raw: np.ndarray) -> np.ndarray:
    s = raw.astype(np.float32)
    # all-zero units get scale 1; guard f32 underflow of tiny positive ranges
    s = np.where(raw == 0, np.float32(1.0), s)
    return np.maximum(s, np.float32(np.finfo(np.float32).smallest_subnormal))


def quantize(
    x: FloatTensor,
    bit_width: int,
    scheme: str = SYMMETRIC,
    granularity: Granularity = Granularity("per_tensor"),
) -> QuantizedTensor:
    if bit_width not in (4, 8):
        raise ParameterError(f"bit_width must be 4 or 8, got {bit_width}")
    data = x.data.astype(np.float64)
    granularity.check_shape(*data.shape)
    lo_q, hi_q = qrange(bit_width, scheme)

    if scheme == SYMMETRIC:
        absmax = _unit_reduce(np.abs(data), granularity, np.max)
        scales = _to_scale(absmax / (2 ** (bit_width - 1) - 1))
        zero_points = None
        params = QuantParams(bit_width, scheme, scales, granularity)
        s = scales[granularity.unit_index(*data.shape)].astype(np.float64)
        q = np.clip(round_half_away(data / s), lo_q, hi_q)
    elif scheme == ASYMMETRIC:
        xmin = _unit_reduce(data, granularity, np.min)
        xmax = _unit_reduce(data, granularity, np.max)
        # constant units: stretch the range to include zero so it is non-empty
        flat = xmax == xmin
        xmin = np.where(flat, np.minimum(xmin, 0.0), xmin)
        xmax = np.where(flat, np.maximum(xmax, 0.0), xmax)
        scales = _to_scale((xmax - xmin) / (2**bit_width - 1))
        zero_points = round_half_away(-xmin / scales.astype(np.float64)).astype(np.int64)
        params = QuantParams(bit_width, scheme, scales, granularity, zero_points)
        idx = granularity.unit_index(*data.shape)
        s = scales[idx].astype(np.float64)
        q = np.clip(round_half_away(data / s) + zero_points[idx], lo_q, hi_q)
    else:
        raise ParameterError(f"unknown scheme {scheme!r}")
    return QuantizedTensor(q.astype(np.int32), params, x.rows, x.cols)


def dequantize(q: QuantizedTensor) -> FloatTensor:
    """Reconstruct ``Q * s`` (or ``(Q - z) * s``) in float64, which is exact."""
    s = q.governing_scales().astype(np.float64)
    vals = q.values.astype(np.float64)
    if q.params.scheme == ASYMMETRIC:
        vals = vals - q.governing_zero_points()
    return FloatTensor(q.rows, q.cols, vals * s)


def reconstruction_mse(x: FloatTensor, x_hat: FloatTensor) -> float:
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = x.data.astype(np.float64) - x_hat.data.astype(np.float64)
    return float(np.mean(diff * diff))


def _sidecar(path) -> str:
    return f"{path}.json"


def save_quantized(q: QuantizedTensor, path: Union[str, PathLike]) -> None:
    """Write values as a QTNS file and the params to ``<path>.json``.

    Asymmetric codes are shifted down by ``2**(n-1)`` so they fit the signed
    payload types; the shift is recorded as ``value_offset``.
    """
    offset = 0 if q.params.scheme == SYMMETRIC else 2 ** (q.params.bit_width - 1)
    dtype = DTYPE_SIGNED4 if q.params.bit_width == 4 else DTYPE_SIGNED8
    write_tensor(QuantizedPayload(dtype, q.shape, q.values - offset), path)
    meta = q.params.to_dict()
    meta["rows"], meta["cols"], meta["value_offset"] = q.rows, q.cols, offset
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_quantized(path: Union[str, PathLike]) -> QuantizedTensor:
    payload = read_tensor(path)
    if not isinstance(payload, QuantizedPayload):
        raise ParameterError(f"{path} holds real values, not quantized codes")
    with open(_sidecar(path)) as fh:
        meta = json.load(fh)
    params = QuantParams.from_dict(meta)
    values = payload.values.astype(np.int32).reshape(meta["rows"], meta["cols"])
    return QuantizedTensor(values + meta.get("value_offset", 0), params, meta["rows"], meta["cols"])
