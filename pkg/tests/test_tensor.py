import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnlf.errors import ShapeError
from cnnlf.tensor import (BNParams, ConvParams, add_elementwise, batchnorm,
                          batchnorm_backward, batchnorm_forward, concat_channels,
                          conv2d, conv2d_grad, relu, relu_grad, round_half_away)

from .oracles import conv2d_loops, finite_difference, max_relative_error


class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = np.ones((1, 1, 3, 3))
        params = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        assert np.array_equal(conv2d(x, params), x)

    def test_zero_weights_give_constant_bias(self, rng):
        x = rng.normal(size=(2, 3, 6, 7))
        params = ConvParams(np.zeros((4, 3, 3, 3)), np.full(4, 2.5))
        out = conv2d(x, params)
        assert out.shape == (2, 4, 6, 7)
        assert np.all(out == 2.5)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        expected = conv2d_loops(x, params.weights, params.bias)
        assert np.abs(conv2d(x, params) - expected).max() < 1e-12

    def test_matches_loop_oracle_5x5_kernel(self, rng):
        x = rng.normal(size=(2, 2, 7, 6))
        params = ConvParams(rng.normal(size=(2, 2, 5, 5)), rng.normal(size=2))
        expected = conv2d_loops(x, params.weights, params.bias)
        assert np.abs(conv2d(x, params) - expected).max() < 1e-12

    def test_linearity_with_zero_bias(self, rng):
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        x = rng.normal(size=(1, 2, 5, 5))
        y = rng.normal(size=(1, 2, 5, 5))
        a, b = 1.7, -0.4
        lhs = conv2d(a * x + b * y, params)
        rhs = a * conv2d(x, params) + b * conv2d(y, params)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_channel_mismatch_names_dimensions(self, rng):
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        with pytest.raises(ShapeError, match="4 channels.*expect 2"):
            conv2d(rng.normal(size=(1, 4, 5, 5)), params)

    def test_input_smaller_than_kernel(self, rng):
        params = ConvParams(rng.normal(size=(1, 1, 5, 5)), np.zeros(1))
        with pytest.raises(ShapeError, match="smaller than kernel"):
            conv2d(rng.normal(size=(1, 1, 3, 3)), params)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestConv2dGrad:
    def test_zero_upstream_zero_gradients(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        dx, dw, db = conv2d_grad(x, params, np.zeros((1, 3, 5, 5)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_bias_gradient_is_upstream_channel_sum(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        up = rng.normal(size=(2, 3, 5, 5))
        _, _, db = conv2d_grad(x, params, up)
        assert np.abs(db - up.sum(axis=(0, 2, 3))).max() < 1e-12

    def test_gradients_match_finite_differences(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        params = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
        up = rng.normal(size=(1, 2, 5, 5))

        def loss():
            return float((conv2d(x, params) * up).sum())

        dx, dw, db = conv2d_grad(x, params, up)
        assert max_relative_error(dx, finite_difference(loss, x)) < 1e-5
        assert max_relative_error(dw, finite_difference(loss, params.weights)) < 1e-5
        assert max_relative_error(db, finite_difference(loss, params.bias)) < 1e-5

    def test_upstream_shape_mismatch(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        params = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        with pytest.raises(ShapeError, match="does not match conv output"):
            conv2d_grad(x, params, np.zeros((1, 3, 4, 5)))


class TestBatchnorm:
    def test_identity_on_normalized_input(self, rng):
        x = rng.normal(size=(4, 3, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        params = BNParams.identity(3)
        out, _ = batchnorm(x, params, mode="train")
        # epsilon shrinks unit-variance data by 1 - 1/sqrt(1 + eps) ~ eps/2 per unit
        bound = (1.0 - 1.0 / np.sqrt(1.0 + params.epsilon)) * np.abs(x).max() + 1e-12
        assert np.abs(out - x).max() <= bound
        assert bound < 1e-4

    def test_zero_scale_gives_constant_shift(self, rng):
        params = BNParams.identity(3)
        params.scale[:] = 0.0
        params.shift[:] = [0.1, -0.2, 0.3]
        out, _ = batchnorm(rng.normal(size=(4, 3, 6, 6)), params, mode="train")
        for c, beta in enumerate(params.shift):
            assert np.allclose(out[:, c], beta)

    def test_train_output_statistics(self, rng):
        params = BNParams.identity(3)
        params.scale[:] = [1.5, -0.7, 0.2]
        params.shift[:] = [0.3, 0.0, -1.0]
        out, _ = batchnorm(rng.normal(1.0, 3.0, size=(6, 3, 10, 10)), params, mode="train")
        mean = out.mean(axis=(0, 2, 3))
        std = out.std(axis=(0, 2, 3))
        assert np.abs(mean - params.shift).max() < 1e-9
        # epsilon shrinks the output std by sqrt(var / (var + eps)), far below 1e-9 here
        assert np.abs(std - np.abs(params.scale)).max() < 1e-4

    def test_running_stats_update(self, rng):
        params = BNParams.identity(2)
        x = rng.normal(2.0, 1.5, size=(4, 2, 5, 5))
        _, stats = batchnorm(x, params, mode="train")
        assert np.allclose(params.running_mean, 0.9 * 0.0 + 0.1 * stats["mean"])
        assert np.allclose(params.running_var, 0.9 * 1.0 + 0.1 * stats["var"])

    def test_infer_uses_running_stats(self, rng):
        params = BNParams(np.array([2.0]), np.array([1.0]),
                          np.array([3.0]), np.array([4.0]))
        x = rng.normal(size=(1, 1, 4, 4))
        out, _ = batchnorm(x, params, mode="infer")
        expected = 2.0 * (x - 3.0) / np.sqrt(4.0 + params.epsilon) + 1.0
        assert np.abs(out - expected).max() < 1e-12

    def test_zero_variance_never_raises(self):
        x = np.full((4, 1, 3, 3), 5.0)
        out, _ = batchnorm(x, BNParams.identity(1), mode="train")
        assert np.all(np.isfinite(out))

    def test_train_needs_batch_of_two(self, rng):
        with pytest.raises(ShapeError, match="batch size >= 2"):
            batchnorm(rng.normal(size=(1, 2, 4, 4)), BNParams.identity(2), mode="train")

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_backward_matches_finite_differences(self, rng, mode):
        x = rng.normal(size=(3, 2, 4, 4))
        params = BNParams(rng.normal(1.0, 0.3, size=2), rng.normal(size=2),
                          rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
        up = rng.normal(size=(3, 2, 4, 4))

        def loss():
            out, _, _ = batchnorm_forward(x, params, mode)
            return float((out * up).sum())

        _, _, cache = batchnorm_forward(x, params, mode)
        dx, dscale, dshift = batchnorm_backward(up, cache)
        assert max_relative_error(dx, finite_difference(loss, x)) < 1e-5
        assert max_relative_error(dscale, finite_difference(loss, params.scale)) < 1e-5
        assert max_relative_error(dshift, finite_difference(loss, params.shift)) < 1e-5


class TestPointwiseOps:
    def test_relu_all_negative(self):
        assert not relu(np.full((1, 1, 2, 2), -3.0)).any()

    def test_relu_all_positive_is_identity(self, rng):
        x = np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.1
        assert np.array_equal(relu(x), x)

    def test_relu_matches_elementwise_oracle(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        expected = np.array([[[[max(v, 0.0) for v in row] for row in ch] for ch in b]
                             for b in x])
        assert np.array_equal(relu(x), expected)

    def test_relu_grad_masks_nonpositive(self, rng):
        x = np.array([[-1.0, 0.0, 2.0]])
        up = np.array([[10.0, 10.0, 10.0]])
        assert np.array_equal(relu_grad(x, up), [[0.0, 0.0, 10.0]])

    def test_concat_channel_order(self, rng):
        a = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=(1, 1, 3, 3))
        out = concat_channels(a, b)
        assert out.shape == (1, 2, 3, 3)
        assert np.array_equal(out[:, 0], a[:, 0])
        assert np.array_equal(out[:, 1], b[:, 0])

    def test_concat_spatial_mismatch(self, rng):
        with pytest.raises(ShapeError, match="matching N,H,W"):
            concat_channels(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 4, 3)))

    def test_add_zero_is_identity(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        assert np.array_equal(add_elementwise(x, np.zeros_like(x)), x)

    def test_add_negation_is_zero(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        assert not add_elementwise(x, -x).any()

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(ShapeError, match="identical shapes"):
            add_elementwise(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 5)))


class TestRounding:
    @given(st.integers(-10000, 10000))
    def test_half_away_on_exact_halves(self, n):
        x = n + 0.5 if n >= 0 else n - 0.5
        expected = n + 1 if n >= 0 else n - 1
        assert round_half_away(x) == expected

    @given(st.floats(-1e6, 1e6, allow_nan=False))
    @settings(max_examples=200)
    def test_half_away_within_half(self, x):
        r = float(round_half_away(x))
        assert abs(r - x) <= 0.5
        assert r == int(r)


def test_forward_outputs_stay_finite(rng):
    x = rng.normal(size=(2, 3, 6, 6)) * 100
    params = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4))
    out = conv2d(x, params)
    assert np.all(np.isfinite(out))
    bn_out, _ = batchnorm(out, BNParams.identity(4), mode="train")
    assert np.all(np.isfinite(bn_out))
