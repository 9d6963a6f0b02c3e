"""Dense n-dimensional tensors backed by numpy buffers.

Activations are laid out N,H,W,C and convolution kernels H,W,Cin,Cout,
both row-major. ``float16`` is a storage type only: arithmetic helpers
widen it to ``float32`` first. ``int8`` tensors always carry their
affine quantization parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ShapeError

DTYPES = {
    "f64": np.dtype(np.float64),
    "f32": np.dtype(np.float32),
    "f16": np.dtype(np.float16),
    "i8": np.dtype(np.int8),
}
_NAMES = {v: k for k, v in DTYPES.items()}


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine mapping ``real = scale * (q - zero_point)``."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ValueError(f"zero_point {self.zero_point} outside int8 range")


def check_shape(shape: Sequence[int]) -> tuple:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


def dtype_name(dtype) -> str:
    try:
        return _NAMES[np.dtype(dtype)]
    except KeyError:
        raise TypeError(f"unsupported element type {dtype!r}") from None


@dataclass(frozen=True, eq=False)
class Tensor:
    data: np.ndarray
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        check_shape(self.data.shape)
        name = dtype_name(self.data.dtype)
        if (name == "i8") != (self.quant is not None):
            raise ValueError("quantization parameters are required for i8 and only for i8")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def widen(self) -> np.ndarray:
        """Return a float array ready for arithmetic (f16 -> f32, i8 dequantized)."""
        if self.quant is not None:
            q = self.quant
            return (np.float32(q.scale) * (self.data.astype(np.float32) - np.float32(q.zero_point)))
        if self.data.dtype == np.float16:
            return self.data.astype(np.float32)
        return self.data

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.quant == other.quant and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


def create(shape, dtype="f32", fill=0) -> Tensor:
    dims = check_shape(shape)
    return Tensor(np.full(dims, fill, dtype=DTYPES[dtype]))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype or a.dtype not in ("f32", "f64"):
        raise TypeError(f"matmul needs matching f32/f64 operands, got {a.dtype}/{b.dtype}")
    return Tensor(a.data @ b.data)


def map_(t: Tensor, f: Callable[[float], float]) -> Tensor:
    """Apply a scalar function to every element; f16 input is widened to f32."""
    if t.dtype == "i8":
        raise TypeError("map requires a floating tensor")
    src = t.widen()
    out = np.fromiter((f(v) for v in src.ravel()), dtype=src.dtype, count=src.size)
    return Tensor(out.reshape(src.shape))


def strides_of(shape) -> tuple:
    dims = check_shape(shape)
    strides = [1] * len(dims)
    for k in range(len(dims) - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]
    return tuple(strides)


def flat_index(coord, shape) -> int:
    dims = check_shape(shape)
    if len(coord) != len(dims) or any(not 0 <= c < d for c, d in zip(coord, dims)):
        raise ShapeError(f"coordinate {tuple(coord)} out of range for shape {dims}")
    return sum(c * s for c, s in zip(coord, strides_of(dims)))


def unravel(index: int, shape) -> tuple:
    dims = check_shape(shape)
    if not 0 <= index < int(np.prod(dims)):
        raise ShapeError(f"flat index {index} out of range for shape {dims}")
    coord = []
    for s in strides_of(dims):
        c, index = divmod(index, s)
        coord.append(c)
    return tuple(coord)
