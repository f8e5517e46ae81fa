import numpy as np
import pytest

from conftest import random_layer
from emoe import ActivationKind, FfnLayer, ffn_forward, neuron_view, pre_activations
from emoe.errors import ShapeError
from emoe.numerics import apply_activation, make_rng


def per_neuron_oracle(layer, x):
    """Sum over neurons of sigma(x . K[:,j]) * V[j,:], the memory view
    of the forward pass."""
    y = np.zeros(layer.h, dtype=np.float64)
    for j in range(layer.d):
        key, value = layer.k[:, j], layer.v[j, :]
        a = float(x @ key) + float(layer.b_k[j])
        y += float(apply_activation(layer.activation, np.array([a]))[0]) * value
    return y + layer.b_v


class TestForward:
    def test_hand_example(self, worked_layer):
        x = np.array([1.0, 1.0])
        assert np.array_equal(pre_activations(worked_layer, x), [1.0, 1.0, 0.0, 4.0])
        assert np.array_equal(ffn_forward(worked_layer, x), [9.0, 1.0])
        assert np.allclose(per_neuron_oracle(worked_layer, x), [9.0, 1.0])

    def test_zero_input(self, worked_layer):
        assert np.array_equal(ffn_forward(worked_layer, np.zeros(2)), np.zeros(2))
        assert np.array_equal(pre_activations(worked_layer, np.zeros(2)), np.zeros(4))

    def test_single_neuron(self, rng):
        layer = random_layer(rng, h=3, d=1)
        x = rng.normal(size=3)
        key, value = neuron_view(layer, 0)
        a = apply_activation(layer.activation, np.array([x @ key]))[0]
        assert np.allclose(ffn_forward(layer, x), a * value)

    def test_matches_per_neuron_oracle(self):
        rng = make_rng(99)
        for _ in range(100):
            h = int(rng.integers(2, 8))
            d = int(rng.integers(1, 12))
            kind = ActivationKind.RELU if rng.random() < 0.5 else ActivationKind.GELU_TANH
            layer = random_layer(rng, h, d, activation=kind, dtype=np.float32)
            x = rng.normal(size=h).astype(np.float32)
            got = ffn_forward(layer, x)
            want = per_neuron_oracle(layer, x)
            assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_pre_activation_linearity(self, rng):
        for _ in range(20):
            layer = random_layer(rng, h=5, d=8, dtype=np.float32)
            x = rng.normal(size=5).astype(np.float32)
            alpha = np.float32(rng.normal())
            got = pre_activations(layer, alpha * x)
            want = alpha * pre_activations(layer, x)
            assert np.allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_forward_is_pure(self, rng):
        layer = random_layer(rng, h=6, d=24)
        x = rng.normal(size=6)
        assert np.array_equal(ffn_forward(layer, x), ffn_forward(layer, x))

    def test_shape_error(self, worked_layer):
        with pytest.raises(ShapeError):
            ffn_forward(worked_layer, np.zeros(3))
        with pytest.raises(ShapeError):
            pre_activations(worked_layer, np.zeros(5))

    def test_basis_vector_reads_key_row(self, rng):
        layer = random_layer(rng, h=4, d=6)
        e1 = np.zeros(4)
        e1[0] = 1.0
        assert np.array_equal(pre_activations(layer, e1), layer.k[0, :])


class TestNeuronView:
    def test_hand_example(self, worked_layer):
        key, value = neuron_view(worked_layer, 3)
        assert key.tolist() == [2.0, 2.0]
        assert value.tolist() == [2.0, 0.0]

    def test_first_neuron(self, worked_layer):
        key, value = neuron_view(worked_layer, 0)
        assert key.tolist() == [1.0, 0.0]
        assert value.tolist() == [1.0, 0.0]

    def test_out_of_range(self, worked_layer):
        with pytest.raises(IndexError):
            neuron_view(worked_layer, 4)


class TestConstruction:
    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            FfnLayer(k=np.zeros((2, 4)), v=np.zeros((3, 2)))

    def test_rejects_non_finite(self):
        k = np.zeros((2, 2))
        k[0, 0] = np.nan
        with pytest.raises(ShapeError):
            FfnLayer(k=k, v=np.zeros((2, 2)))

    def test_bias_shapes(self):
        with pytest.raises(ShapeError):
            FfnLayer(k=np.zeros((2, 4)), v=np.zeros((4, 2)), b_k=np.zeros(3))

    def test_gate_scores_include_bias(self):
        k = np.ones((2, 2))
        v = np.ones((2, 2))
        layer = FfnLayer(k=k, v=v, b_k=np.array([1.0, -1.0]))
        x = np.zeros(2)
        assert pre_activations(layer, x).tolist() == [1.0, -1.0]
