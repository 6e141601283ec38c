"""Dense n-dimensional tensors, the one value type shared by every module.

Tensors are immutable by convention: operations allocate fresh outputs and
no function in the package mutates a tensor it did not create. Images use
the order (batch, height, width, channel). There is no broadcasting and no
implicit type promotion; "f32" is the working precision, "f64" is reserved
for test oracles.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import LoadError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {"f32": 1, "f64": 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class Tensor:
    """Row-major contiguous array of f32 or f64 scalars."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.dtype not in (np.float32, np.float64):
            raise ShapeError(f"unsupported dtype {data.dtype}")
        self.data = np.ascontiguousarray(data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data.astype(_DTYPES[dtype]))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def create(
    shape: Sequence[int],
    fill: float | None = None,
    data: Iterable[float] | None = None,
    dtype: str = "f32",
) -> Tensor:
    """Build a tensor from a fill scalar or explicit row-major data."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    np_dtype = _DTYPES[dtype]
    if (fill is None) == (data is None):
        raise ShapeError("create needs exactly one of fill or data")
    if fill is not None:
        return Tensor(np.full(shape, fill, dtype=np_dtype))
    arr = np.asarray(list(data), dtype=np_dtype)
    n = int(np.prod(shape)) if shape else 1
    if arr.size != n:
        raise ShapeError(f"data length {arr.size} does not match shape {shape}")
    return Tensor(arr.reshape(shape))


def from_array(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ShapeError(f"{op} produced a non-finite value")
    return arr


def ewise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Element-wise add/sub/mul; shapes must match exactly."""
    _check_same_shape(a, b)
    if op == "add":
        out = a.data + b.data
    elif op == "sub":
        out = a.data - b.data
    elif op == "mul":
        out = a.data * b.data
    else:
        raise ShapeError(f"unknown ewise op {op!r}")
    return Tensor(_check_finite(out, f"ewise {op}"))


def safe_divide(num: Tensor, den: Tensor, eps: float) -> Tensor:
    """num / (den + eps*sign(den)) with sign(0) taken as +1; always finite."""
    if eps <= 0:
        raise ShapeError("eps must be positive")
    _check_same_shape(num, den)
    sign = np.where(den.data >= 0, 1.0, -1.0).astype(den.data.dtype)
    out = num.data / (den.data + eps * sign)
    return Tensor(_check_finite(out, "safe_divide"))


def reduce(op: str, t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Reduce over the given axes (all axes when omitted)."""
    if axes is None:
        ax: tuple[int, ...] | None = None
    else:
        ax = tuple(int(a) for a in axes)
        for a in ax:
            if not (-t.data.ndim <= a < t.data.ndim):
                raise ShapeError(f"axis {a} invalid for shape {t.shape}")
    if op == "sum":
        out = t.data.sum(axis=ax)
    elif op == "abs_sum":
        out = np.abs(t.data).sum(axis=ax)
    elif op == "max":
        out = t.data.max(axis=ax)
    else:
        raise ShapeError(f"unknown reduce op {op!r}")
    return Tensor(_check_finite(np.asarray(out, dtype=t.data.dtype), f"reduce {op}"))


# Raw tensor file: magic "XTEN", rank u32 LE, extents u32 LE, dtype code
# byte (1=f32, 2=f64), then row-major scalars little-endian.

def tensor_bytes(t: Tensor) -> bytes:
    head = b"XTEN" + struct.pack("<I", len(t.shape))
    head += struct.pack(f"<{len(t.shape)}I", *t.shape)
    head += bytes([_DTYPE_CODES[t.dtype]])
    le = "<f4" if t.dtype == "f32" else "<f8"
    return head + t.data.astype(le).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor record, returning it and the offset past its end."""
    if buf[offset : offset + 4] != b"XTEN":
        raise LoadError("bad tensor magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 16:
        raise LoadError(f"implausible tensor rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    code = buf[offset]
    offset += 1
    if code not in _CODE_DTYPES:
        raise LoadError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    width = 4 if dtype == "f32" else 8
    n = int(np.prod(shape)) if shape else 1
    end = offset + n * width
    if end > len(buf):
        raise LoadError("truncated tensor data")
    le = "<f4" if dtype == "f32" else "<f8"
    arr = np.frombuffer(buf[offset:end], dtype=le).reshape(shape)
    return Tensor(arr.astype(_DTYPES[dtype])), end


def write_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise LoadError("trailing bytes after tensor data")
    return t
