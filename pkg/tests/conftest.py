import numpy as np
import pytest

from emoe import ActivationKind, FfnLayer
from emoe.numerics import make_rng


def random_layer(rng, h, d, activation=ActivationKind.RELU, dtype=np.float64, scale=None):
    """Gaussian layer with 1/sqrt(fan-in) scaling unless overridden."""
    k_scale = scale if scale is not None else 1.0 / np.sqrt(h)
    v_scale = scale if scale is not None else 1.0 / np.sqrt(d)
    k = rng.normal(0, k_scale, size=(h, d)).astype(dtype)
    v = rng.normal(0, v_scale, size=(d, h)).astype(dtype)
    return FfnLayer(k=k, v=v, activation=activation)


@pytest.fixture
def rng():
    return make_rng(20240811)


@pytest.fixture
def worked_layer():
    """The small worked example used throughout the tests: h=2, d=4."""
    k = np.array([[1, 0, -1, 2], [0, 1, 1, 2]], dtype=np.float64)
    v = np.array([[1, 0], [0, 1], [1, 1], [2, 0]], dtype=np.float64)
    return FfnLayer(k=k, v=v, activation=ActivationKind.RELU)
