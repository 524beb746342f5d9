"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` values of dtype float32 or float64 with
rank at most 4.  Every public function validates shapes, returns a fresh
array and rejects non-finite results.
"""
from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DomainError, NonFiniteError, ShapeError
from .rng import Rng

MAX_RANK = 4


class DType(enum.IntEnum):
    F32 = 0
    F64 = 1

    @property
    def numpy(self):
        return np.float32 if self is DType.F32 else np.float64

    @classmethod
    def of(cls, array) -> "DType":
        if array.dtype == np.float32:
            return cls.F32
        if array.dtype == np.float64:
            return cls.F64
        raise ShapeError(f"unsupported dtype {array.dtype}")

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls.of(np.empty(0, dtype=value))


F32 = DType.F32
F64 = DType.F64


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds {MAX_RANK}")
    if any(d <= 0 for d in shape):
        raise ShapeError(f"shape {shape} has a non-positive extent")
    return shape


def check_finite(a: np.ndarray, op: str = "result") -> np.ndarray:
    if not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{op}: non-finite value", bad)
    return a


def as_tensor(data, dtype=F64) -> np.ndarray:
    a = np.array(data, dtype=DType.parse(dtype).numpy)
    check_shape(a.shape)
    return check_finite(a, "as_tensor")


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- constructors


def full(shape, value, dtype=F64) -> np.ndarray:
    shape = check_shape(shape)
    if not math.isfinite(value):
        raise NonFiniteError("full: non-finite fill value")
    return np.full(shape, value, dtype=DType.parse(dtype).numpy)


def zeros(shape, dtype=F64) -> np.ndarray:
    return full(shape, 0.0, dtype)


def ones(shape, dtype=F64) -> np.ndarray:
    """All-ones tensor, the identity of the Hadamard group."""
    return full(shape, 1.0, dtype)


def gaussian(shape, mean: float, stddev: float, rng: Rng, dtype=F64) -> np.ndarray:
    """I.i.d. normal samples via Box-Muller, consuming the stream of ``rng``."""
    if not (math.isfinite(mean) and math.isfinite(stddev)):
        raise NonFiniteError("gaussian: non-finite mean or stddev")
    if stddev <= 0:
        raise DomainError(f"gaussian: stddev must be positive, got {stddev}")
    shape = check_shape(shape)
    samples = mean + stddev * rng.normal(math.prod(shape))
    return samples.reshape(shape).astype(DType.parse(dtype).numpy)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return check_finite(a - b, "sub")


def scale(a, s: float):
    if not math.isfinite(s):
        raise NonFiniteError("scale: non-finite factor")
    return check_finite(a * a.dtype.type(s), "scale")


def hadamard(a, b):
    _same_shape(a, b, "hadamard")
    return check_finite(a * b, "hadamard")


def map_exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a)
    return check_finite(out, "map_exp")


def reciprocal(a, eps: float = 1e-12):
    small = np.abs(a) <= eps
    if small.any():
        raise DomainError(f"reciprocal: |entry| <= {eps}", np.argwhere(small)[0])
    return check_finite(1.0 / a, "reciprocal").astype(a.dtype)


def map_ln(a):
    bad = ~(a > 0)
    if bad.any():
        raise DomainError("map_ln: non-positive entry", np.argwhere(bad)[0])
    return check_finite(np.log(a), "map_ln")


def relu(a):
    return np.maximum(a, a.dtype.type(0))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with plain left-to-right accumulation over the inner index."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return check_finite(kernels.matmul(a, b), "matmul")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose: expected a matrix")
    return np.ascontiguousarray(a.T)


def reshape(a, new_shape):
    new_shape = check_shape(new_shape)
    if math.prod(new_shape) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, {new_shape} needs {math.prod(new_shape)}")
    return np.ascontiguousarray(a).reshape(new_shape).copy()


def flatten_kernel(kernel):
    """(C_out, C_in, k, k) -> (C_out, C_in*k*k), row-major."""
    if kernel.ndim != 4:
        raise ShapeError(f"flatten_kernel: expected a 4-D kernel, got shape {kernel.shape}")
    c_out = kernel.shape[0]
    return reshape(kernel, (c_out, kernel.size // c_out))


def unflatten_kernel(matrix, kernel_shape):
    kernel_shape = check_shape(kernel_shape)
    if len(kernel_shape) != 4:
        raise ShapeError("unflatten_kernel: kernel_shape must be 4-D")
    if matrix.ndim != 2 or matrix.shape != (kernel_shape[0], math.prod(kernel_shape[1:])):
        raise ShapeError(f"unflatten_kernel: matrix {matrix.shape} does not fit kernel {kernel_shape}")
    return reshape(matrix, kernel_shape)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ShapeError(f"conv: ({size} + 2*{pad} - {k}) / {stride} is not a non-negative integer")
    return span // stride + 1


def im2col(x, k: int, stride: int = 1, pad: int = 0):
    """Unroll (B, C, H, W) patches into a (C*k*k, B*H'*W') matrix."""
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected (B, C, H, W), got {x.shape}")
    out_h = conv_output_size(x.shape[2], k, stride, pad)
    out_w = conv_output_size(x.shape[3], k, stride, pad)
    return kernels.im2col(x, k, stride, pad, out_h, out_w)


def col2im(cols, input_shape, k: int, stride: int = 1, pad: int = 0):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    _, chans, height, width = input_shape
    out_h = conv_output_size(height, k, stride, pad)
    out_w = conv_output_size(width, k, stride, pad)
    if cols.shape != (chans * k * k, input_shape[0] * out_h * out_w):
        raise ShapeError(f"col2im: columns {cols.shape} do not match input {tuple(input_shape)}")
    return kernels.col2im(cols, tuple(input_shape), k, stride, pad, out_h, out_w)


def _conv_check(x, kernel):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d: input and kernel must be 4-D")
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")


def conv2d(x, kernel, stride: int = 1, pad: int = 0):
    """Zero-padded 2-D cross-correlation, (B, C_in, H, W) -> (B, C_out, H', W')."""
    _conv_check(x, kernel)
    k = kernel.shape[2]
    out_h = conv_output_size(x.shape[2], k, stride, pad)
    out_w = conv_output_size(x.shape[3], k, stride, pad)
    cols = im2col(x, k, stride, pad)
    out = matmul(flatten_kernel(kernel), cols)
    return fold_output(out, x.shape[0], out_h, out_w)


def fold_output(out_cols, batch, out_h, out_w):
    """(C_out, B*H'*W') -> (B, C_out, H', W')."""
    c_out = out_cols.shape[0]
    return np.ascontiguousarray(out_cols.reshape(c_out, batch, out_h, out_w).transpose(1, 0, 2, 3))


def unfold_output(grad_out):
    """Inverse of :func:`fold_output`."""
    batch, c_out, out_h, out_w = grad_out.shape
    return np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3).reshape(c_out, batch * out_h * out_w))


# ---------------------------------------------------------------- reductions


def frobenius_norm(a) -> float:
    return math.sqrt(float(np.sum(np.square(a, dtype=np.float64))))


def max_abs(a) -> float:
    return float(np.max(np.abs(a)))


def allclose(a, b, rtol: float = 1e-12, atol: float = 0.0) -> bool:
    _same_shape(a, b, "allclose")
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))
