"""Dense tensor primitives and the finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. The helpers
here cover the handful of operations the rest of the package needs beyond what
numpy gives for free, each with an explicit backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Return a contiguous row-major array of a supported dtype."""
    if np.dtype(dtype) not in [np.dtype(d) for d in DTYPES]:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    return np.ascontiguousarray(data, dtype=dtype)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides: the last axis has stride 1."""
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return tuple(strides)


def flatten_index(idx: Sequence[int], shape: Sequence[int]) -> int:
    if len(idx) != len(shape):
        raise ValueError(f"index {tuple(idx)} has wrong rank for shape {tuple(shape)}")
    flat = 0
    for i, size, stride in zip(idx, shape, strides_of(shape)):
        if not 0 <= i < size:
            raise IndexError(f"index {tuple(idx)} out of bounds for shape {tuple(shape)}")
        flat += i * stride
    return flat


def unflatten_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    total = int(np.prod(shape, dtype=np.int64))
    if not 0 <= flat < total:
        raise IndexError(f"flat index {flat} out of bounds for shape {tuple(shape)}")
    out = []
    for stride in strides_of(shape):
        q, flat = divmod(flat, stride)
        out.append(q)
    return tuple(out)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch in add: {a.dtype} vs {b.dtype}")
    return a + b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def reduce_max_over_points(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise max over the point axis of an ``n x c`` tensor.

    Returns ``(values, argmax)``; ties resolve to the lowest point index.
    """
    if x.ndim != 2:
        raise ValueError(f"expected an n x c tensor, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("cannot reduce over zero points")
    # np.argmax returns the first occurrence of the maximum
    argmax = np.argmax(x, axis=0)
    values = x[argmax, np.arange(x.shape[1])]
    return values, argmax


def reduce_max_backward(dvalues: np.ndarray, argmax: np.ndarray, n: int) -> np.ndarray:
    dx = np.zeros((n, dvalues.shape[0]), dtype=dvalues.dtype)
    dx[argmax, np.arange(dvalues.shape[0])] = dvalues
    return dx


@dataclass
class GradCheckReport:
    op_name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    epsilon: float
    tolerance: float = 1e-4

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.op_name:<28s} abs={self.max_abs_err:.3e} "
                f"rel={self.max_rel_err:.3e} eps={self.epsilon:.0e} {status}")


def grad_check(
    op_forward: Callable[[np.ndarray], np.ndarray],
    op_backward: Callable[[np.ndarray, np.ndarray], np.ndarray],
    input: np.ndarray,
    epsilon: float = 1e-5,
    *,
    tolerance: float = 1e-4,
    op_name: str = "op",
    seed: int = 0,
) -> GradCheckReport:
    """Compare an analytic input gradient against central differences.

    The output is contracted with a fixed random cotangent ``g`` so the check
    covers the full vector-Jacobian product: the analytic side is
    ``op_backward(x, g)`` and the numeric side differentiates ``<f(x), g>``.
    The relative error is normwise: ``max|a - n| / max(max|a|, max|n|)``.
    """
    x = np.array(input, dtype=np.float64)
    y = np.asarray(op_forward(x.copy()), dtype=np.float64)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(y.shape)

    analytic = np.asarray(op_backward(x.copy(), g.copy()), dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"{op_name}: backward returned {analytic.shape}, expected {x.shape}")

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(np.sum(np.asarray(op_forward(x.copy()), dtype=np.float64) * g))
        flat[i] = orig - epsilon
        f_minus = float(np.sum(np.asarray(op_forward(x.copy()), dtype=np.float64) * g))
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)

    abs_err = float(np.max(np.abs(analytic - numeric))) if x.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    rel_err = abs_err / scale
    return GradCheckReport(op_name, abs_err, rel_err, rel_err <= tolerance, epsilon, tolerance)
