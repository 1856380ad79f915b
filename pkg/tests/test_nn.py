import numpy as np
import pytest

import seaformer.nn as nn
import seaformer.tensor as T
from oracles import (avg_pool_oracle, batchnorm_oracle, bilinear_oracle,
                     conv2d_oracle)
from seaformer.tensor import ConfigurationError, MacCounter, Tensor


def rand(rng, shape):
    return Tensor._wrap(rng.standard_normal(shape))


class TestConv2d:
    def test_pointwise_scaling(self):
        x = Tensor(np.ones((1, 3, 3)))
        p = nn.Conv2dParams(Tensor(np.full((1, 1, 1, 1), 2.0)), padding=0)
        out = nn.conv2d(x, p)
        assert out.shape == (1, 3, 3)
        assert np.allclose(out.data, 2.0)

    def test_padded_strided_ones(self):
        # 4x4 ones, 3x3 ones kernel, pad 1, stride 2: corners see 4 cells,
        # the final window sits fully inside and sees 9.
        x = Tensor(np.ones((1, 4, 4)))
        p = nn.Conv2dParams(Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
        out = nn.conv2d(x, p)
        assert out.data[0].tolist() == [[4.0, 6.0], [6.0, 9.0]]

    def test_depthwise_equals_per_channel_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 5, 5))
        w = rng.standard_normal((4, 1, 3, 3))
        p = nn.Conv2dParams(Tensor._wrap(w), stride=1, padding=1, groups=4)
        out = nn.conv2d(Tensor._wrap(x), p)
        ref, _ = conv2d_oracle(x, w, stride=1, padding=1, groups=4)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_grouped_strided_matches_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6, 6))
        w = rng.standard_normal((6, 2, 3, 3))
        p = nn.Conv2dParams(Tensor._wrap(w), stride=2, padding=1, groups=2)
        out = nn.conv2d(Tensor._wrap(x), p)
        ref, _ = conv2d_oracle(x, w, stride=2, padding=1, groups=2)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_channel_group_mismatch_is_config_error(self):
        p = nn.Conv2dParams(Tensor(np.zeros((4, 2, 3, 3))), groups=2)
        with pytest.raises(ConfigurationError):
            nn.conv2d(Tensor(np.zeros((5, 4, 4))), p)

    def test_separable_construction(self):
        # A dense conv whose weight factors into depthwise + pointwise parts
        # must equal running those two stages explicitly.
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 4))
        dw = rng.standard_normal((2, 1, 3, 3))
        pw = rng.standard_normal((3, 2, 1, 1))
        dense_w = np.zeros((3, 2, 3, 3))
        for co in range(3):
            for ci in range(2):
                dense_w[co, ci] = pw[co, ci, 0, 0] * dw[ci, 0]
        dense, _ = conv2d_oracle(x, dense_w, stride=1, padding=1)
        stage1 = nn.conv2d(Tensor._wrap(x),
                           nn.Conv2dParams(Tensor._wrap(dw), padding=1, groups=2))
        stage2 = nn.conv2d(stage1, nn.Conv2dParams(Tensor._wrap(pw), padding=0))
        assert np.abs(stage2.data - dense).max() < 1e-12


class TestMacMetadata:
    def test_conv_macs_match_loop_counter(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6, 6))
        w = rng.standard_normal((6, 2, 3, 3))
        p = nn.Conv2dParams(Tensor._wrap(w), stride=2, padding=1, groups=2)
        with MacCounter() as c:
            nn.conv2d(Tensor._wrap(x), p)
        _, mults = conv2d_oracle(x, w, stride=2, padding=1, groups=2)
        assert c.macs == mults

    def test_pointwise_conv_formula(self):
        p = nn.Conv2dParams(Tensor(np.zeros((16, 8, 1, 1))), padding=0)
        with MacCounter() as c:
            nn.conv2d(Tensor(np.zeros((8, 4, 4))), p)
        assert c.macs == 8 * 16 * 16

    def test_batchnorm_macs_match_loop_counter(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 2, 2))
        p = nn.init_bn(3)
        with MacCounter() as c:
            nn.batchnorm_infer(Tensor._wrap(x), p)
        _, mults = batchnorm_oracle(x, p.gamma.data, p.beta.data,
                                    p.running_mean.data, p.running_var.data, p.eps,
                                    sqrt_macs=T.TRANSCENDENTAL_MACS)
        assert c.macs == mults

    def test_bilinear_macs_match_loop_counter(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 4))
        with MacCounter() as c:
            nn.bilinear_resize(Tensor._wrap(x), 6, 7)
        _, mults = bilinear_oracle(x, 6, 7)
        assert c.macs == mults

    def test_avg_pool_macs_match_loop_counter(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 6, 6))
        with MacCounter() as c:
            nn.avg_pool2d(Tensor._wrap(x), 2, 2)
        _, mults = avg_pool_oracle(x, 2, 2)
        assert c.macs == mults


class TestBatchNorm:
    def test_identity_stats(self):
        rng = np.random.default_rng(7)
        x = rand(rng, (3, 4, 4))
        out = nn.batchnorm_infer(x, nn.init_bn(3))
        denom = np.maximum(np.abs(x.data), 1.0)
        assert (np.abs(out.data - x.data) / denom).max() < 1e-5

    def test_zero_gamma_gives_beta(self):
        p = nn.init_bn(2)
        p.gamma = Tensor([0.0, 0.0])
        p.beta = Tensor([1.5, -2.0])
        out = nn.batchnorm_infer(Tensor(np.ones((2, 3, 3))), p)
        assert np.allclose(out.data[0], 1.5) and np.allclose(out.data[1], -2.0)

    def test_random_params_match_formula_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((3, 2, 2))
        p = nn.BatchNormParams(
            gamma=rand(rng, (3,)), beta=rand(rng, (3,)),
            running_mean=rand(rng, (3,)),
            running_var=Tensor._wrap(0.5 + rng.random(3)), eps=1e-5)
        out = nn.batchnorm_infer(Tensor._wrap(x), p)
        ref, _ = batchnorm_oracle(x, p.gamma.data, p.beta.data,
                                  p.running_mean.data, p.running_var.data, p.eps)
        assert np.abs(out.data - ref).max() < 1e-12


class TestBilinearResize:
    def test_identity_size(self):
        rng = np.random.default_rng(9)
        x = rand(rng, (2, 3, 5))
        out = nn.bilinear_resize(x, 3, 5)
        assert np.array_equal(out.data, x.data)

    def test_hand_interpolated_upsample(self):
        out = nn.bilinear_resize(Tensor([[[0.0, 2.0]]]), 1, 4)
        assert np.allclose(out.data[0, 0], [0.0, 0.5, 1.5, 2.0])

    def test_constant_preserved_any_size(self):
        x = Tensor(np.full((2, 3, 3), 1.25))
        for oh, ow in ((1, 1), (5, 7), (4, 2)):
            out = nn.bilinear_resize(x, oh, ow)
            assert np.allclose(out.data, 1.25)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 4, 5))
        out = nn.bilinear_resize(Tensor._wrap(x), 7, 3)
        ref, _ = bilinear_oracle(x, 7, 3)
        assert np.abs(out.data - ref).max() < 1e-12


class TestAvgPool:
    def test_window_mean(self):
        out = nn.avg_pool2d(Tensor([[[1.0, 3.0], [5.0, 7.0]]]), 2, 2)
        assert out.item() == 4.0

    def test_constant(self):
        out = nn.avg_pool2d(Tensor(np.full((2, 4, 4), 3.0)), 2, 2)
        assert np.allclose(out.data, 3.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 6, 6))
        out = nn.avg_pool2d(Tensor._wrap(x), 2, 2)
        ref, _ = avg_pool_oracle(x, 2, 2)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_halves_dims(self):
        out = nn.avg_pool2d(Tensor(np.zeros((3, 8, 6))), 2, 2)
        assert out.shape == (3, 4, 3)


class TestMobileNetBlock:
    def test_stride_two_halves_spatial(self):
        rng = np.random.default_rng(12)
        spec = nn.MobileNetBlockSpec(kernel=3, expansion=4, out_channels=16, stride=2)
        params = nn.init_mobilenet_block(rng, 16, spec)
        out = nn.mobilenet_block(rand(rng, (16, 8, 8)), params)
        assert out.shape == (16, 4, 4)

    def test_zero_weights_identity_residual(self):
        rng = np.random.default_rng(13)
        spec = nn.MobileNetBlockSpec(kernel=3, expansion=2, out_channels=8, stride=1)
        params = nn.init_mobilenet_block(rng, 8, spec)
        for _, t in nn.named_tensors(params):
            if t.rank == 4:  # conv weights
                t.data = np.zeros_like(t.data)
        x = rand(rng, (8, 5, 5))
        out = nn.mobilenet_block(x, params)
        assert np.array_equal(out.data, x.data)

    def test_parameter_count_closed_form(self):
        # MB(k=3, e=4, c_in=16, c_out=16):
        # expand 16*64, depthwise 64*9, project 64*16,
        # batchnorm pairs 2*(64 + 64 + 16) -> 2912 trainable parameters
        rng = np.random.default_rng(14)
        spec = nn.MobileNetBlockSpec(kernel=3, expansion=4, out_channels=16, stride=1)
        params = nn.init_mobilenet_block(rng, 16, spec)
        assert nn.parameter_count(params) == 2912

    def test_out_channels_always_match_spec(self):
        rng = np.random.default_rng(15)
        for c_in, c_out, stride in ((8, 12, 1), (8, 8, 2), (12, 8, 1)):
            spec = nn.MobileNetBlockSpec(kernel=5, expansion=3,
                                         out_channels=c_out, stride=stride)
            params = nn.init_mobilenet_block(rng, c_in, spec)
            out = nn.mobilenet_block(rand(rng, (c_in, 6, 6)), params)
            assert out.shape[0] == c_out

    def test_no_residual_when_channels_change(self):
        rng = np.random.default_rng(16)
        spec = nn.MobileNetBlockSpec(kernel=3, expansion=2, out_channels=6, stride=1)
        params = nn.init_mobilenet_block(rng, 8, spec)
        for _, t in nn.named_tensors(params):
            if t.rank == 4:
                t.data = np.zeros_like(t.data)
        out = nn.mobilenet_block(rand(rng, (8, 4, 4)), params)
        assert np.allclose(out.data, 0.0)


class TestInitDeterminism:
    def test_same_seed_same_weights(self):
        a = nn.init_conv(np.random.default_rng(42), 4, 8, 3)
        b = nn.init_conv(np.random.default_rng(42), 4, 8, 3)
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_fan_in_bound(self):
        p = nn.init_conv(np.random.default_rng(0), 4, 8, 3)
        lim = np.sqrt(6.0 / (4 * 9))
        assert np.abs(p.weight.data).max() <= lim
