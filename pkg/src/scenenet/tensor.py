"""Rank-4 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)`` in C
(row-major) order.  The helpers here validate shapes, provide a handful of
elementwise and reduction operations with deterministic accumulation, a
central finite-difference gradient used by the test-suite, and the ``TNSR``
binary file format used for checkpoints and dataset caches.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "DimensionError",
    "ValidationError",
    "NumericError",
    "Shape",
    "COMPUTE",
    "VERIFY",
    "from_data",
    "shape_of",
    "check4",
    "elementwise",
    "reduce",
    "finite_difference_grad",
    "save_tensor",
    "load_tensor",
    "encode_tensor",
    "decode_tensor",
]

COMPUTE = np.float32
VERIFY = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ValidationError(ValueError):
    """Raised for out-of-range arguments (labels, filter sizes, ...)."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int


def shape_of(a: np.ndarray) -> Shape:
    return Shape(*check4(a).shape)


def check4(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        shape = getattr(a, "shape", None)
        raise DimensionError(f"{name} must be a rank-4 array (n, c, h, w), got shape {shape}")
    if min(a.shape) < 1:
        raise DimensionError(f"{name} has an empty dimension: {a.shape}")
    return a


def from_data(dims, data, dtype=VERIFY) -> np.ndarray:
    """Build a tensor from ``dims = (n, c, h, w)`` and a flat row-major sequence."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or min(dims) < 1:
        raise DimensionError(f"dims must be four positive integers, got {dims}")
    flat = np.asarray(data, dtype=dtype).ravel()
    expected = dims[0] * dims[1] * dims[2] * dims[3]
    if flat.size != expected:
        raise DimensionError(f"data length {flat.size} does not match dims {dims} ({expected} elements)")
    return flat.reshape(dims).copy()


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``op`` in {"add", "sub", "mul", "scale"} to ``a`` and ``b``.

    ``b`` is either a tensor of the same shape or a Python/NumPy scalar.
    A fresh array is always returned.
    """
    check4(a, "a")
    if op == "scale":
        if not np.isscalar(b):
            raise DimensionError("scale expects a scalar constant")
        return a * a.dtype.type(b)
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _ELEMENTWISE[op](a, a.dtype.type(b))
    check4(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _ELEMENTWISE[op](a, b)


def _sequential_sum(a: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise scheme
    keep = [ax for ax in range(4) if ax not in axes]
    moved = np.transpose(a, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    total = np.cumsum(flat, axis=-1)[..., -1]
    out_shape = tuple(1 if ax in axes else a.shape[ax] for ax in range(4))
    return total.reshape(out_shape)


def reduce(op: str, a: np.ndarray, axes=(0, 1, 2, 3), strict: bool = True) -> np.ndarray:
    """Reduce ``a`` over ``axes``.

    ``sum`` and ``max`` keep rank 4 (reduced axes become length 1).
    ``argmax`` reduces over the channel axis only and returns an integer
    array of shape ``(n, 1, h, w)``; ties resolve to the lowest channel.
    With ``strict`` the sum is accumulated sequentially, element by element.
    """
    check4(a)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(int(ax) for ax in axes)))
    if not axes or any(ax < 0 or ax > 3 for ax in axes):
        raise DimensionError(f"invalid reduction axes {axes} for a rank-4 tensor")
    if op == "sum":
        if strict:
            return _sequential_sum(a, axes)
        return a.sum(axis=axes, keepdims=True)
    if op == "max":
        return a.max(axis=axes, keepdims=True)
    if op == "argmax":
        if axes != (1,):
            raise DimensionError("argmax reduces over the channel axis (1) only")
        return np.argmax(a, axis=1)[:, None, :, :]
    raise ValueError(f"unknown reduction {op!r}")


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = float(f(x))
        flat_x[i] = orig - eps
        f_minus = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


# -- TNSR binary format -------------------------------------------------------

_MAGIC = b"TNSR"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBI4I")


def encode_tensor(a: np.ndarray) -> bytes:
    check4(a)
    code = _DTYPE_CODES.get(a.dtype)
    if code is None:
        raise ValidationError(f"unsupported dtype {a.dtype}; expected float32 or float64")
    header = _HEADER.pack(_MAGIC, _VERSION, code, 4, *a.shape)
    payload = np.ascontiguousarray(a, dtype=_CODE_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValidationError("truncated TNSR header")
    magic, version, code, ndim, *dims = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise ValidationError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValidationError(f"unsupported TNSR version {version}")
    if ndim != 4:
        raise ValidationError(f"TNSR ndim must be 4, got {ndim}")
    if code not in _CODE_DTYPES:
        raise ValidationError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = dims[0] * dims[1] * dims[2] * dims[3]
    payload = buf[_HEADER.size:]
    if len(payload) != count * dtype.itemsize:
        raise ValidationError(f"payload size {len(payload)} does not match dims {tuple(dims)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(a))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
