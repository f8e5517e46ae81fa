"""Dense feed-forward layer treated as a key-value memory.

A layer holds keys K (h x d, one key per column), values V (d x h, one
value per row) and an activation. The forward map is
``sigma(x @ K + b_k) @ V + b_v``, equivalently the sum over neurons j of
``sigma(x . K[:, j]) * V[j, :]``.  Biases default to zero; they exist so
layers extracted from real checkpoints stay representable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import ActivationKind, apply_activation, require_finite


@dataclass
class FfnLayer:
    k: np.ndarray  # (h, d) keys as columns
    v: np.ndarray  # (d, h) values as rows
    activation: ActivationKind = ActivationKind.RELU
    b_k: np.ndarray | None = field(default=None)  # (d,)
    b_v: np.ndarray | None = field(default=None)  # (h,)

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k)
        self.v = np.asarray(self.v)
        if self.k.ndim != 2 or self.v.ndim != 2:
            raise ShapeError("K and V must be 2-D")
        h, d = self.k.shape
        if self.v.shape != (d, h):
            raise ShapeError(f"V shape {self.v.shape} does not match K shape {self.k.shape}")
        if h < 1 or d < 1:
            raise ShapeError("h and d must be at least 1")
        if self.v.dtype != self.k.dtype:
            raise ShapeError(f"K/V dtype mismatch: {self.k.dtype} vs {self.v.dtype}")
        if self.b_k is None:
            self.b_k = np.zeros(d, dtype=self.k.dtype)
        else:
            self.b_k = np.asarray(self.b_k, dtype=self.k.dtype)
            if self.b_k.shape != (d,):
                raise ShapeError(f"b_k must have shape ({d},)")
        if self.b_v is None:
            self.b_v = np.zeros(h, dtype=self.k.dtype)
        else:
            self.b_v = np.asarray(self.b_v, dtype=self.k.dtype)
            if self.b_v.shape != (h,):
                raise ShapeError(f"b_v must have shape ({h},)")
        for name, arr in (("K", self.k), ("V", self.v), ("b_k", self.b_k), ("b_v", self.b_v)):
            require_finite(arr, name)

    @property
    def h(self) -> int:
        return self.k.shape[0]

    @property
    def d(self) -> int:
        return self.k.shape[1]


def _check_input(layer: FfnLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != layer.h:
        raise ShapeError(f"input must be a vector of length {layer.h}, got shape {x.shape}")
    return x


def pre_activations(layer: FfnLayer, x: np.ndarray) -> np.ndarray:
    """Neuron scores x @ K + b_k, before the activation."""
    x = _check_input(layer, x)
    return x @ layer.k + layer.b_k


def ffn_forward(layer: FfnLayer, x: np.ndarray) -> np.ndarray:
    x = _check_input(layer, x)
    return apply_activation(layer.activation, pre_activations(layer, x)) @ layer.v + layer.b_v


def neuron_view(layer: FfnLayer, j: int) -> tuple[np.ndarray, np.ndarray]:
    """The j-th key/value pair (K[:, j], V[j, :]) as views."""
    if not 0 <= j < layer.d:
        raise IndexError(f"neuron index {j} out of range for d={layer.d}")
    return layer.k[:, j], layer.v[j, :]
