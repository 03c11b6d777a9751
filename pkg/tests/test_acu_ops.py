# -*- coding: utf-8 -*-
import numpy as np
import pytest

from acu_ops import (
    AcuLayer,
    ConvGeometry,
    ConvLayer,
    PositionSet,
    acu_backward,
    acu_forward,
    bilinear_sample,
    make_grid_positions,
    naive_conv_backward,
    naive_conv_forward,
)
from errors import InvalidArgumentError
from verify import central_difference, oracle_acu_forward, random_acu_layer


def _single_synapse(alpha, beta, weight=1.0, channels=1):
    geo = ConvGeometry(channels, channels, channels)
    positions = PositionSet(np.array([[[alpha, beta]]] * channels), pin_origin=False)
    return AcuLayer(geo, np.full((channels, 1, 1, 1), weight), np.zeros(channels), positions)


def _loop_conv(x, w, b, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    y = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for m in range(ho):
                for mm in range(wo):
                    y[i, o, m, mm] = np.sum(w[o] * xp[i, :, m:m + kh, mm:mm + kw]) + b[o]
    return y


class TestBilinearSample:
    def test_constant_field(self):
        x = np.full((1, 1, 4, 5), 5.0)
        assert bilinear_sample(x, 0, 0, 1.3, 2.7) == pytest.approx(5.0)

    def test_integer_location(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        assert bilinear_sample(x, 0, 1, 2.0, 3.0) == x[0, 1, 2, 3]

    def test_half_way_patch(self):
        x = np.array([[1.0, 3.0], [2.0, 4.0]]).reshape(1, 1, 2, 2)  # Q11=1, Q21=2, Q12=3, Q22=4
        assert bilinear_sample(x, 0, 0, 0.5, 0.5) == pytest.approx(2.5)

    def test_zero_extension(self):
        x = np.ones((1, 1, 3, 3))
        assert bilinear_sample(x, 0, 0, -0.5, 1.0) == pytest.approx(0.5)
        assert bilinear_sample(x, 0, 0, 10.0, 10.0) == 0.0


class TestNaiveConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 4, 4))
        layer = ConvLayer(ConvGeometry(1, 1), np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(naive_conv_forward(x, layer), x)

    def test_all_ones(self):
        layer = ConvLayer(ConvGeometry(1, 1), np.ones((1, 1, 3, 3)), np.zeros(1))
        y = naive_conv_forward(np.ones((1, 1, 3, 3)), layer)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 1, 2, 2))
        w = rng.normal(size=(1, 1, 2, 2))
        b = rng.normal(size=1)
        layer = ConvLayer(ConvGeometry(1, 1), w, b)
        np.testing.assert_allclose(naive_conv_forward(x, layer), _loop_conv(x, w, b, 0), atol=1e-12)

    def test_padded_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        layer = ConvLayer(ConvGeometry(3, 2, padding=1), w, b)
        np.testing.assert_allclose(naive_conv_forward(x, layer), _loop_conv(x, w, b, 1), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        geo = ConvGeometry(4, 4, groups=2, padding=1, dilation=2)
        layer = ConvLayer(geo, rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4))
        x = rng.normal(size=(2, 4, 6, 6))
        d_out = rng.normal(size=naive_conv_forward(x, layer).shape)
        grads = naive_conv_backward(x, layer, d_out)

        def loss():
            return float(np.sum(d_out * naive_conv_forward(x, layer)))

        np.testing.assert_allclose(grads.d_weights, central_difference(loss, layer.weights, 1e-6), atol=1e-6)
        np.testing.assert_allclose(grads.d_input, central_difference(loss, x, 1e-6), atol=1e-6)
        np.testing.assert_allclose(grads.d_bias, d_out.sum(axis=(0, 2, 3)))


class TestGridPositions:
    def test_three_by_three_order(self):
        offsets = make_grid_positions(3, 3).offsets[0]
        expected = [(0, 0), (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        np.testing.assert_array_equal(offsets, np.array(expected, dtype=float))

    def test_dilation_scales_grid(self):
        offsets = make_grid_positions(3, 3, dilation=2).offsets[0].tolist()
        assert [-2.0, -2.0] in offsets and [2.0, 2.0] in offsets

    def test_degenerate_grid(self):
        ps = make_grid_positions(1, 1, dilation=5)
        np.testing.assert_array_equal(ps.offsets, np.zeros((1, 1, 2)))

    def test_groups_are_copies(self):
        ps = make_grid_positions(3, 3, groups=4)
        assert ps.offsets.shape == (4, 9, 2)
        np.testing.assert_array_equal(ps.offsets[0], ps.offsets[3])

    @pytest.mark.parametrize("kh, kw", [(2, 3), (3, 4), (0, 1)])
    def test_even_or_empty_kernel_rejected(self, kh, kw):
        with pytest.raises(InvalidArgumentError):
            make_grid_positions(kh, kw)


class TestAcuForward:
    def test_identity_synapse(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        geo = ConvGeometry(1, 1)
        layer = AcuLayer(geo, np.ones((1, 1, 1, 1)), np.zeros(1), PositionSet(np.zeros((1, 1, 2))))
        np.testing.assert_array_equal(acu_forward(x, layer), x)

    def test_grid_matches_dense_three_by_three(self, rng):
        for _ in range(50):
            cin, cout = rng.integers(1, 4), rng.integers(1, 4)
            x = rng.normal(size=(2, cin, 5, 6))
            kernel = rng.normal(size=(cout, cin, 3, 3))
            bias = rng.normal(size=cout)
            acu = AcuLayer.from_grid(ConvGeometry(cin, cout), kernel, bias)
            conv = ConvLayer(ConvGeometry(cin, cout, padding=1), kernel, bias)
            np.testing.assert_allclose(acu_forward(x, acu), naive_conv_forward(x, conv), atol=1e-12)

    def test_dilated_grid_matches_dilated_conv(self, rng):
        x = rng.normal(size=(1, 2, 7, 7))
        kernel = rng.normal(size=(2, 1, 3, 3))
        acu = AcuLayer.from_grid(ConvGeometry(2, 2, groups=2), kernel, dilation=2)
        conv = ConvLayer(ConvGeometry(2, 2, groups=2, padding=2, dilation=2), kernel, np.zeros(2))
        np.testing.assert_allclose(acu_forward(x, acu), naive_conv_forward(x, conv), atol=1e-12)

    def test_group_isolation_depthwise(self, rng):
        for _ in range(20):
            layer = random_acu_layer(rng, 4, 4, 4, 3)
            x = rng.normal(size=(1, 4, 6, 6))
            c = int(rng.integers(0, 4))
            x2 = x.copy()
            x2[:, c] += rng.normal(size=(6, 6))
            y, y2 = acu_forward(x, layer), acu_forward(x2, layer)
            for o in range(4):
                if o == c:
                    assert not np.array_equal(y[:, o], y2[:, o])
                else:
                    np.testing.assert_array_equal(y[:, o], y2[:, o])

    def test_linear_in_input(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 5)
        layer.bias[:] = 0.0
        x1, x2 = rng.normal(size=(2, 2, 4, 6, 6))
        lhs = acu_forward(2.0 * x1 - 3.0 * x2, layer)
        rhs = 2.0 * acu_forward(x1, layer) - 3.0 * acu_forward(x2, layer)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_linear_in_weights(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 5)
        w1, w2 = rng.normal(size=(2,) + layer.weights.shape)
        zero = np.zeros(layer.geometry.out_channels)

        def with_weights(w):
            return AcuLayer(layer.geometry, w, zero, layer.positions, layer.group_mode)

        x = rng.normal(size=(2, 4, 6, 6))
        lhs = acu_forward(x, with_weights(0.5 * w1 + 2.0 * w2))
        rhs = 0.5 * acu_forward(x, with_weights(w1)) + 2.0 * acu_forward(x, with_weights(w2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_forward_matches_oracle_for_every_thread_count(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 3, span=2.0)
        x = rng.normal(size=(3, 4, 5, 5))
        expected = oracle_acu_forward(x, layer)
        for threads in (None, 1, 2, 4):
            np.testing.assert_allclose(acu_forward(x, layer, threads=threads), expected, atol=1e-10)

    def test_translation_covariance(self, rng):
        layer = random_acu_layer(rng, 2, 2, 1, 5, span=2.0)
        x = np.zeros((1, 2, 16, 16))
        x[:, :, 5:11, 5:11] = rng.normal(size=(1, 2, 6, 6))
        shifted = np.roll(x, (1, 2), axis=(2, 3))
        y = acu_forward(x, layer)
        np.testing.assert_allclose(acu_forward(shifted, layer), np.roll(y, (1, 2), axis=(2, 3)), atol=1e-12)

    def test_shared_mode_uses_one_position_set(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 3, group_mode="shared")
        assert layer.positions.groups == 1
        np.testing.assert_array_equal(layer.group_positions(0), layer.group_positions(1))

    def test_shared_mode_equals_multi_with_repeated_sets(self, rng):
        shared = random_acu_layer(rng, 4, 4, 2, 3, group_mode="shared")
        multi = AcuLayer(shared.geometry, shared.weights, shared.bias,
                         PositionSet(np.repeat(shared.positions.offsets, 2, axis=0)), "multi")
        x = rng.normal(size=(2, 4, 6, 6))
        np.testing.assert_array_equal(acu_forward(x, shared, threads=1), acu_forward(x, multi, threads=1))

    def test_group_count_mismatch_rejected(self):
        geo = ConvGeometry(4, 4, groups=2)
        with pytest.raises(InvalidArgumentError):
            AcuLayer(geo, np.zeros((4, 2, 1, 9)), np.zeros(4), make_grid_positions(3, 3, groups=3))

    def test_pinned_origin_enforced(self):
        with pytest.raises(InvalidArgumentError):
            PositionSet(np.array([[[0.5, 0.0], [1.0, 1.0]]]))

    def test_channel_mismatch_rejected(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 3)
        with pytest.raises(InvalidArgumentError):
            acu_forward(np.zeros((1, 3, 5, 5)), layer)

    def test_strided_output_size(self, rng):
        layer = random_acu_layer(rng, 2, 2, 1, 3)
        layer = AcuLayer(ConvGeometry(2, 2, stride=2, padding=1), layer.weights, layer.bias, layer.positions)
        assert acu_forward(rng.normal(size=(1, 2, 7, 7)), layer).shape == (1, 2, 5, 5)

    def test_threads_do_not_change_result(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 5)
        x = rng.normal(size=(5, 4, 6, 6))
        np.testing.assert_allclose(acu_forward(x, layer, threads=3), acu_forward(x, layer, threads=1), atol=1e-12)


class TestAcuBackward:
    def test_zero_upstream(self, rng):
        layer = random_acu_layer(rng, 4, 4, 2, 5)
        x = rng.normal(size=(2, 4, 5, 5))
        g = acu_backward(x, layer, np.zeros((2, 4, 5, 5)))
        for arr in (g.d_weights, g.d_bias, g.d_positions, g.d_input):
            assert not np.any(arr)

    def test_constant_input_has_flat_position_gradient(self, rng):
        layer = _single_synapse(0.3, 0.4)
        x = np.full((1, 1, 8, 8), 2.0)
        d_out = np.zeros((1, 1, 8, 8))
        d_out[:, :, 2:6, 2:6] = rng.normal(size=(4, 4))  # lejos del borde con ceros
        g = acu_backward(x, layer, d_out)
        np.testing.assert_array_equal(g.d_positions, np.zeros((1, 1, 2)))

    def test_pinned_origin_drops_synapse_zero(self, rng):
        layer = random_acu_layer(rng, 2, 2, 1, 4)
        g = acu_backward(rng.normal(size=(1, 2, 5, 5)), layer, rng.normal(size=(1, 2, 5, 5)))
        assert g.d_positions.shape == (1, 3, 2)
        assert g.d_positions_full().shape == (1, 4, 2)
        assert not np.any(g.d_positions_full()[:, 0])

    def test_shared_mode_accumulates_all_groups(self, rng):
        shared = random_acu_layer(rng, 4, 4, 2, 3, group_mode="shared", frac_range=(0.2, 0.8))
        x = rng.normal(size=(2, 4, 5, 5))
        d_out = rng.normal(size=(2, 4, 5, 5))
        multi = AcuLayer(shared.geometry, shared.weights, shared.bias,
                         PositionSet(np.repeat(shared.positions.offsets, 2, axis=0)), "multi")
        g_shared = acu_backward(x, shared, d_out)
        g_multi = acu_backward(x, multi, d_out)
        np.testing.assert_allclose(g_shared.d_positions[0], g_multi.d_positions.sum(axis=0), atol=1e-12)

    def test_threads_agree_with_single_thread(self, rng):
        layer = random_acu_layer(rng, 4, 4, 4, 3)
        x = rng.normal(size=(6, 4, 5, 5))
        d_out = rng.normal(size=(6, 4, 5, 5))
        one = acu_backward(x, layer, d_out, threads=1)
        many = acu_backward(x, layer, d_out, threads=3)
        again = acu_backward(x, layer, d_out, threads=3)
        np.testing.assert_allclose(many.d_weights, one.d_weights, atol=1e-12)
        np.testing.assert_allclose(many.d_positions, one.d_positions, atol=1e-12)
        np.testing.assert_allclose(many.d_input, one.d_input, atol=1e-12)
        np.testing.assert_array_equal(many.d_positions, again.d_positions)

    def test_d_out_shape_checked(self, rng):
        layer = random_acu_layer(rng, 2, 2, 1, 3)
        with pytest.raises(InvalidArgumentError):
            acu_backward(np.zeros((1, 2, 5, 5)), layer, np.zeros((1, 2, 4, 4)))
