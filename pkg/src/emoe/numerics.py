"""Small dense-matrix kernel: matmul, activations, top-k, seeded RNG.

Everything operates on plain numpy arrays (float32 for layer storage,
float64 for oracle and gradient paths). All functions are pure and
re-entrant; repeated calls on identical inputs are bitwise identical
within a process.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .errors import ShapeError

F32 = np.float32
F64 = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ActivationKind(Enum):
    RELU = "relu"
    GELU_TANH = "gelu_tanh"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream
    on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def require_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with explicit shape checking.

    Backed by numpy; the reduction order is fixed by the library, so
    repeated calls are bitwise reproducible.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def apply_activation(kind: ActivationKind, v: np.ndarray) -> np.ndarray:
    """Elementwise activation. The tanh-form GELU is
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    v = np.asarray(v)
    if kind is ActivationKind.RELU:
        return np.maximum(v, np.asarray(0, dtype=v.dtype))
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    return (0.5 * v * (1.0 + np.tanh(inner))).astype(v.dtype, copy=False)


def activation_grad(kind: ActivationKind, v: np.ndarray) -> np.ndarray:
    """Derivative of apply_activation with respect to its input,
    evaluated elementwise at v."""
    v = np.asarray(v)
    if kind is ActivationKind.RELU:
        return (v > 0).astype(v.dtype)
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
    return (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner).astype(v.dtype, copy=False)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, returned in ascending index
    order (set semantics). Ties go to the lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError(f"topk_indices expects a vector, got {scores.ndim}-D")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    # stable sort on the negated scores: equal values keep index order
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])
