"""Layer semantics and gradients: conv2d, batch norm, pooling, dropout."""

import numpy as np
import pytest

from conftest import gradcheck
from mtdistill.errors import ConfigError, DataError, ShapeError
from mtdistill.layers import (
    BatchNorm2D,
    Conv2D,
    Dropout,
    Linear,
    batch_norm,
    conv2d,
    dropout,
    maxpool2d,
    relu,
)
from mtdistill.tensor import Tensor, backward


def t(arr, grad=False):
    return Tensor(np.asarray(arr), requires_grad=grad)


class TestConv2D:
    def test_one_by_one_identity(self):
        x = t(np.random.default_rng(0).standard_normal((2, 1, 3, 7)).astype(np.float32))
        out = conv2d(x, t(np.ones((1, 1, 1, 1), np.float32)), t(np.zeros(1, np.float32)))
        assert np.array_equal(out.data, x.data)

    def test_output_shape_formula(self):
        x = t(np.zeros((1, 1, 3, 100), np.float32))
        out = conv2d(x, t(np.zeros((8, 1, 1, 5), np.float32)), t(np.zeros(8, np.float32)))
        assert out.shape == (1, 8, 3, 96)

    def test_strided_padded_shape(self):
        x = t(np.zeros((2, 3, 5, 11), np.float32))
        out = conv2d(x, t(np.zeros((4, 3, 3, 3), np.float32)), t(np.zeros(4, np.float32)),
                     stride=(2, 2), padding=(1, 1))
        assert out.shape == (2, 4, 3, 6)  # floor((5+2-3)/2)+1, floor((11+2-3)/2)+1

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(t(np.zeros((1, 2, 3, 4))), t(np.zeros((1, 3, 1, 1))), t(np.zeros(1)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger"):
            conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 1))), t(np.zeros(1)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 2, 3, 6))
        k = rng.standard_normal((3, 2, 2, 3)) * 0.5
        b = rng.standard_normal(3) * 0.1

        def build():
            tx, tk, tb = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True), Tensor(b, requires_grad=True)
            return (conv2d(tx, tk, tb, stride=(1, 2), padding=(1, 1)) ** 2.0).sum(), [tx, tk, tb]

        gradcheck(build, [x, k, b])

    def test_layer_owns_kernel_and_bias(self):
        layer = Conv2D(2, 4, (1, 3), rng=np.random.default_rng(0))
        assert layer.kernel.shape == (4, 2, 1, 3)
        assert dict(layer.parameters())["bias"].shape == (4,)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(3.0, 2.5, (8, 4, 2, 5)).astype(np.float32))
        layer = BatchNorm2D(4)
        out = layer(x, train=True).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-5)
        assert np.all(np.abs(var - 1.0) < 1e-4)

    def test_affine_output_statistics(self):
        rng = np.random.default_rng(3)
        x = t(rng.standard_normal((16, 2, 1, 50)).astype(np.float32))
        layer = BatchNorm2D(2)
        layer.gamma.data[...] = 2.0
        layer.beta.data[...] = 3.0
        out = layer(x, train=True).data
        assert np.allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
        assert np.allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-3)

    def test_eval_mode_formula(self):
        x = t(np.random.default_rng(4).standard_normal((3, 2, 2, 2)).astype(np.float32))
        layer = BatchNorm2D(2, eps=1e-5)
        out = layer(x, train=False).data
        assert np.allclose(out, x.data / np.sqrt(1.0 + 1e-5), rtol=1e-6)

    def test_running_stats_update_rule(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 3, 1, 4)).astype(np.float32)
        layer = BatchNorm2D(3, momentum=0.1)
        expected_mean = 0.9 * layer.running_mean + 0.1 * x.mean(axis=(0, 2, 3))
        expected_var = 0.9 * layer.running_var + 0.1 * x.var(axis=(0, 2, 3))
        layer(t(x), train=True)
        assert np.allclose(layer.running_mean, expected_mean, atol=1e-6)
        assert np.allclose(layer.running_var, expected_var, atol=1e-6)

    def test_eval_mode_does_not_mutate_state(self):
        layer = BatchNorm2D(2)
        rm, rv = layer.running_mean.copy(), layer.running_var.copy()
        layer(t(np.random.default_rng(6).standard_normal((4, 2, 1, 3)).astype(np.float32)), train=False)
        assert np.array_equal(layer.running_mean, rm)
        assert np.array_equal(layer.running_var, rv)

    def test_degenerate_variance_error(self):
        layer = BatchNorm2D(2)
        with pytest.raises(DataError, match="at least 2"):
            layer(t(np.zeros((1, 2, 1, 1), np.float32)), train=True)

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigError):
            BatchNorm2D(2, momentum=0.0)
        with pytest.raises(ConfigError):
            BatchNorm2D(2, eps=0.0)

    def test_train_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 2, 2, 4))
        ga = 1.0 + 0.3 * rng.standard_normal(2)
        be = 0.3 * rng.standard_normal(2)
        rm, rv = np.zeros(2), np.ones(2)

        def build():
            tx, tg, tb = Tensor(x, requires_grad=True), Tensor(ga, requires_grad=True), Tensor(be, requires_grad=True)
            y, _ = batch_norm(tx, tg, tb, rm, rv, eps=1e-5, train=True)
            return (y**2.0).sum(), [tx, tg, tb]

        gradcheck(build, [x, ga, be])

    def test_eval_gradients(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((3, 2, 1, 4))
        ga = 1.0 + 0.3 * rng.standard_normal(2)
        be = 0.3 * rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), np.abs(rng.standard_normal(2)) + 0.5

        def build():
            tx, tg, tb = Tensor(x, requires_grad=True), Tensor(ga, requires_grad=True), Tensor(be, requires_grad=True)
            y, _ = batch_norm(tx, tg, tb, rm, rv, eps=1e-5, train=False)
            return (y**2.0).sum(), [tx, tg, tb]

        gradcheck(build, [x, ga, be])


class TestDropout:
    def test_p_zero_is_identity(self):
        x = t(np.ones((4, 4), np.float32))
        assert dropout(x, 0.0, np.random.default_rng(0), train=True) is x

    def test_eval_mode_is_identity(self):
        x = t(np.ones((4, 4), np.float32))
        assert dropout(x, 0.9, None, train=False) is x

    def test_inverted_scaling_concentrates(self):
        x = t(np.ones(100_000, np.float32))
        out = dropout(x, 0.5, np.random.default_rng(1), train=True)
        assert 0.99 <= float(out.data.mean()) <= 1.01

    def test_masks_independent_across_calls(self):
        x = t(np.ones(1000, np.float32))
        rng = np.random.default_rng(2)
        a = dropout(x, 0.5, rng, train=True).data
        b = dropout(x, 0.5, rng, train=True).data
        assert not np.array_equal(a, b)

    def test_p_one_rejected(self):
        with pytest.raises(ConfigError):
            dropout(t(np.ones(3)), 1.0, np.random.default_rng(0), train=True)
        with pytest.raises(ConfigError):
            Dropout(1.0)

    def test_train_mode_needs_rng(self):
        with pytest.raises(ConfigError, match="RNG"):
            dropout(t(np.ones(3)), 0.5, None, train=True)

    def test_gradient_with_frozen_mask(self):
        x = np.random.default_rng(3).standard_normal(40)

        def build():
            tx = Tensor(x, requires_grad=True)
            return (dropout(tx, 0.5, np.random.default_rng(99), train=True) ** 2.0).sum(), [tx]

        gradcheck(build, [x])


class TestMaxPoolReluLinear:
    def test_relu_values(self):
        assert relu(t([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_gradient_zero_at_zero(self):
        x = t([-1.0, 0.0, 2.0], grad=True)
        grads = backward(relu(x).sum())
        assert grads[x].tolist() == [0.0, 0.0, 1.0]

    def test_maxpool_values(self):
        x = t(np.array([1.0, 3.0, 2.0, 4.0], np.float32).reshape(1, 1, 1, 4))
        out = maxpool2d(x, (1, 2), (1, 2))
        assert out.data.reshape(-1).tolist() == [3.0, 4.0]

    def test_maxpool_window_too_large(self):
        with pytest.raises(ShapeError, match="larger"):
            maxpool2d(t(np.zeros((1, 1, 1, 3))), (2, 2))

    def test_maxpool_gradient(self):
        # distinct values so no window ties near h
        x = (np.random.default_rng(4).permutation(48).reshape(2, 2, 3, 4) * 0.1).astype(np.float64)

        def build():
            tx = Tensor(x, requires_grad=True)
            return (maxpool2d(tx, (1, 2)) ** 2.0).sum(), [tx]

        gradcheck(build, [x])

    def test_maxpool_tie_routes_to_first(self):
        x = t(np.array([[2.0, 2.0]], np.float32).reshape(1, 1, 1, 2), grad=True)
        grads = backward(maxpool2d(x, (1, 2)).sum())
        assert grads[x].reshape(-1).tolist() == [1.0, 0.0]

    def test_linear_identity(self):
        layer = Linear(3, 3, rng=np.random.default_rng(5))
        layer.weight.data[...] = np.eye(3, dtype=np.float32)
        layer.bias.data[...] = 0.0
        x = t(np.random.default_rng(6).standard_normal((4, 3)).astype(np.float32))
        assert np.array_equal(layer(x).data, x.data)

    def test_linear_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 5)) * 0.5
        b = rng.standard_normal(5) * 0.1

        def build():
            tx = Tensor(x, requires_grad=True)
            layer = Linear(3, 5, rng=np.random.default_rng(0), dtype=np.float64)
            layer.weight = Tensor(w, requires_grad=True)
            layer.bias = Tensor(b, requires_grad=True)
            return (layer(tx) ** 2.0).sum(), [tx, layer.weight, layer.bias]

        gradcheck(build, [x, w, b])
