"""Dense tensors, the QTNS binary format and synthetic generators.

File layout (all little-endian)::

    magic      4 bytes   b"QTNS"
    version    u16
    dtype      u8        0 = real32, 1 = signed8, 2 = packed signed4
    ndim       u8        1 or 2
    dims       ndim x u64
    payload    real32 / int8 values, or two signed nibbles per byte
               (even element in the low nibble)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike
from typing import Union

import numpy as np

from intscale.errors import FormatError, LengthError, NonFiniteError, ParameterError

MAGIC = b"QTNS"
VERSION = 1

DTYPE_REAL32 = 0
DTYPE_SIGNED8 = 1
DTYPE_SIGNED4 = 2

_HEADER = struct.Struct("<4sHBB")
_DIM = struct.Struct("<Q")

LLAMA_GROUP = 128


@dataclass(frozen=True, eq=False)
class FloatTensor:
    """Row-major real matrix.

    Data read from disk or generated is float32. Reconstructions produced by
    ``dequantize`` keep float64 so that ``q * s`` is held exactly; such tensors
    are narrowed to real32 when written.
    """

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError(f"tensor dims must be >= 1, got {self.rows}x{self.cols}")
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.size != self.rows * self.cols:
            raise LengthError(
                f"data has {data.size} elements, expected {self.rows * self.cols}"
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor contains NaN or Inf")
        data = np.ascontiguousarray(data.reshape(self.rows, self.cols))
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> FloatTensor:
        arr = np.asarray(array)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ParameterError(f"only 1-D and 2-D tensors are supported, got {arr.ndim}-D")
        return cls(arr.shape[0], arr.shape[1], arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FloatTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class QuantizedPayload:
    """Integer values read from a signed8 or packed-signed4 QTNS file."""

    dtype_code: int
    dims: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        if self.dtype_code not in (DTYPE_SIGNED8, DTYPE_SIGNED4):
            raise ParameterError(f"not an integer dtype code: {self.dtype_code}")
        if len(self.dims) not in (1, 2):
            raise ParameterError(f"ndim must be 1 or 2, got {len(self.dims)}")
        values = np.asarray(self.values)
        if values.size != int(np.prod(self.dims, dtype=np.uint64)):
            raise LengthError(f"{values.size} values do not match dims {self.dims}")
        lo, hi = (-128, 127) if self.dtype_code == DTYPE_SIGNED8 else (-8, 7)
        if values.size and (values.min() < lo or values.max() > hi):
            raise ParameterError(f"values outside [{lo}, {hi}] for dtype {self.dtype_code}")
        values = values.astype(np.int8).reshape(self.dims)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def bit_width(self) -> int:
        return 8 if self.dtype_code == DTYPE_SIGNED8 else 4

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedPayload):
            return NotImplemented
        return (
            self.dtype_code == other.dtype_code
            and tuple(self.dims) == tuple(other.dims)
            and np.array_equal(self.values, other.values)
        )


Tensor = Union[FloatTensor, QuantizedPayload]


def pack_int4(values) -> bytes:
    """Pack signed 4-bit values two per byte, element ``2i`` in the low nibble."""
    v = np.asarray(values, dtype=np.int64).ravel()
    if v.size and (v.min() < -8 or v.max() > 7):
        raise ParameterError("signed4 values must lie in [-8, 7]")
    nib = (v & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise LengthError(f"{raw.size} bytes cannot hold exactly {count} nibbles")
    nib = np.empty(raw.size * 2, dtype=np.uint8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count].astype(np.int8)
    # sign-extend
    return np.where(nib >= 8, nib - 16, nib).astype(np.int8)


def _encode(tensor: Tensor) -> tuple[int, tuple[int, ...], bytes]:
    if isinstance(tensor, FloatTensor):
        payload = tensor.data.astype("<f4").tobytes()
        return DTYPE_REAL32, tensor.shape, payload
    if isinstance(tensor, QuantizedPayload):
        if tensor.dtype_code == DTYPE_SIGNED8:
            payload = tensor.values.astype("<i1").tobytes()
        else:
            payload = pack_int4(tensor.values)
        return tensor.dtype_code, tuple(tensor.dims), payload
    raise ParameterError(f"cannot serialize {type(tensor).__name__}")


def write_tensor(tensor: Tensor, path: Union[str, PathLike]) -> None:
    dtype_code, dims, payload = _encode(tensor)
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, len(dims))
    header += b"".join(_DIM.pack(int(d)) for d in dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path: Union[str, PathLike]) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the QTNS header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported QTNS version {version}")
    if ndim not in (1, 2):
        raise FormatError(f"ndim must be 1 or 2, got {ndim}")
    offset = _HEADER.size
    if len(blob) < offset + ndim * _DIM.size:
        raise LengthError("file truncated inside dims")
    dims = tuple(_DIM.unpack_from(blob, offset + i * _DIM.size)[0] for i in range(ndim))
    offset += ndim * _DIM.size
    count = 1
    for d in dims:
        count *= d
    if count >= 2**64:
        raise FormatError("element count overflows u64")

    if dtype_code == DTYPE_REAL32:
        nbytes = 4 * count
    elif dtype_code == DTYPE_SIGNED8:
        nbytes = count
    elif dtype_code == DTYPE_SIGNED4:
        nbytes = (count + 1) // 2
    else:
        raise FormatError(f"unknown dtype code {dtype_code}")
    payload = blob[offset:]
    if len(payload) != nbytes:
        raise LengthError(f"payload is {len(payload)} bytes, header implies {nbytes}")

    if dtype_code == DTYPE_REAL32:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{path}: real payload contains NaN or Inf")
        rows, cols = (1, dims[0]) if ndim == 1 else dims
        return FloatTensor(rows, cols, data)
    if dtype_code == DTYPE_SIGNED8:
        values = np.frombuffer(payload, dtype="<i1")
    else:
        values = unpack_int4(payload, count)
    return QuantizedPayload(dtype_code, dims, values)


def generate_synthetic(
    rows: int,
    cols: int,
    distribution: str = "gaussian",
    seed: int = 0,
    *,
    sigma: float = 1.0,
    lo: float = 0.0,
    hi: float = 1.0,
) -> FloatTensor:
    """Deterministic random float32 matrix.

    ``llama_like`` draws a magnitude per (column, 128-row block) so that
    4-bit symmetric group-128 quantization yields scales inside
    ``[2**-10, 2**-6]``, with the smallest one in ``[2**-10, 2**-9)``.
    """
    if rows < 1 or cols < 1:
        raise ParameterError(f"rows and cols must be >= 1, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        if not sigma > 0:
            raise ParameterError(f"gaussian sigma must be > 0, got {sigma}")
        data = rng.normal(0.0, sigma, size=(rows, cols))
    elif distribution == "uniform":
        if lo > hi:
            raise ParameterError(f"uniform bounds require lo <= hi, got ({lo}, {hi})")
        data = rng.uniform(lo, hi, size=(rows, cols)) if lo < hi else np.full((rows, cols), lo)
    elif distribution == "llama_like":
        data = _llama_like(rows, cols, rng)
    else:
        raise ParameterError(f"unknown distribution {distribution!r}")
    return FloatTensor(rows, cols, data.astype(np.float32))


def _llama_like(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    n_blocks = -(-rows // LLAMA_GROUP)
    exponents = rng.uniform(-9.95, -6.05, size=(n_blocks, cols))
    exponents[0, 0] = rng.uniform(-9.95, -9.05)
    qmax = 7.0
    out = np.empty((rows, cols))
    for b in range(n_blocks):
        block = rng.standard_t(df=5, size=(min(LLAMA_GROUP, rows - b * LLAMA_GROUP), cols))
        peak = np.abs(block).max(axis=0)
        peak[peak == 0] = 1.0
        out[b * LLAMA_GROUP : (b + 1) * LLAMA_GROUP] = block / peak * (qmax * 2.0 ** exponents[b])
    return out
