"""Dense array primitives shared by every other module.

Tensors are plain C-ordered ``numpy.ndarray`` objects. The helpers here add the
contracts the rest of the package relies on: no broadcasting except against a
scalar, population variance, and explicit errors instead of silent reshaping.
"""
from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}

Scalar = Union[int, float]


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def _check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ValueError(f"axis lengths must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], precision: str = "f64") -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype_of(precision))


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` or ``scalar-mul`` elementwise.

    Tensor-tensor operations require identical shapes; the only broadcast
    allowed is against a Python or numpy scalar.
    """
    a = np.asarray(a)
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        if op not in ("add", "sub", "mul", "scalar-mul"):
            raise ValueError(f"unknown elementwise op {op!r}")
    else:
        b = np.asarray(b)
        if op == "scalar-mul":
            raise ValueError("scalar-mul expects a scalar right operand")
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op in ("mul", "scalar-mul"):
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def reduce(op: str, a: np.ndarray, axes: Iterable[int] | None = None) -> np.ndarray:
    """Mean or population variance (divisor = element count) over ``axes``."""
    a = np.asarray(a)
    axes = tuple(range(a.ndim)) if axes is None else tuple(int(ax) for ax in axes)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"axis {ax} out of range for rank {a.ndim}")
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if a.size == 0 or count == 0:
        raise ValueError("empty reduction")
    if op == "mean":
        return a.mean(axis=axes)
    if op == "var":
        return a.var(axis=axes)
    raise ValueError(f"unknown reduction {op!r}")


def flatten(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1)


def reshape(a: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = _check_shape(shape)
    a = np.ascontiguousarray(a)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    return a.reshape(shape)
