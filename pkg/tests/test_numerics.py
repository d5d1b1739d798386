import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bvfi.numerics import (NonFiniteError, bilinear_resize, check_finite, conv2d, gradcheck,
                           grid_sample_bilinear, layernorm, softmax, window_merge, window_partition)
from oracles import bilinear_scalar, conv2d_direct


class TestConv2d:
    def test_scalar_kernel_doubles(self):
        x = torch.arange(9.0).view(1, 1, 3, 3)
        out = conv2d(x, torch.tensor([[[[2.0]]]]))
        assert torch.equal(out, 2 * x)

    def test_ones_kernel_on_2x2(self):
        x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = conv2d(x, torch.ones(1, 1, 3, 3), padding=1)
        np.testing.assert_allclose(out.numpy(), conv2d_direct(x, np.ones((1, 1, 3, 3)), padding=1))
        assert torch.all(out == 10.0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_direct_summation(self, stride, padding):
        gen = torch.Generator().manual_seed(stride * 10 + padding)
        x = torch.randn(2, 3, 7, 6, generator=gen)
        w = torch.randn(4, 3, 3, 3, generator=gen)
        b = torch.randn(4, generator=gen)
        out = conv2d(x, w, b, stride=stride, padding=padding)
        ref = conv2d_direct(x, w, b, stride, padding)
        assert out.shape == ref.shape
        assert out.shape[-2] == (7 + 2 * padding - 3) // stride + 1
        np.testing.assert_allclose(out.numpy(), ref, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_bad_stride_and_padding(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), stride=0)
        with pytest.raises(ValueError):
            conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), padding=-1)

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        rep = gradcheck(lambda x, w: conv2d(x, w, padding=1).sum(), [x, w])
        assert rep.passed, rep


class TestGridSample:
    def test_identity_grid(self):
        x = torch.rand(2, 3, 5, 4)
        ys, xs = torch.meshgrid(torch.arange(5.0), torch.arange(4.0), indexing="ij")
        coords = torch.stack([ys, xs]).expand(2, 2, 5, 4)
        assert torch.equal(grid_sample_bilinear(x, coords), x)

    def test_midpoint(self):
        x = torch.tensor([[[[3.0, 7.0]]]])
        coords = torch.tensor([0.0, 0.5]).view(1, 2, 1, 1)
        assert grid_sample_bilinear(x, coords).item() == pytest.approx(5.0)

    def test_matches_scalar_oracle(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.rand(1, 1, 5, 5, generator=gen, dtype=torch.float64)
        coords = torch.rand(1, 2, 6, 6, generator=gen, dtype=torch.float64) * 4
        out = grid_sample_bilinear(x, coords)
        for i in range(6):
            for j in range(6):
                ref = bilinear_scalar(x[0, 0].numpy(), coords[0, 0, i, j].item(), coords[0, 1, i, j].item())
                assert abs(out[0, 0, i, j].item() - ref) < 1e-6

    def test_zero_padding_outside(self):
        x = torch.ones(1, 1, 3, 3)
        coords = torch.tensor([[-5.0, 1.0], [-0.5, 2.5]]).T.reshape(1, 2, 1, 2)
        out = grid_sample_bilinear(x, coords)
        assert out[0, 0, 0, 0].item() == 0.0
        # Half a pixel outside on each axis keeps a quarter of the weight.
        assert out[0, 0, 0, 1].item() == pytest.approx(0.25)

    def test_nonfinite_coords(self):
        with pytest.raises(NonFiniteError):
            grid_sample_bilinear(torch.ones(1, 1, 2, 2), torch.full((1, 2, 1, 1), float("nan")))


class TestElementwise:
    def test_softmax_uniform(self):
        out = softmax(torch.full((2, 5), 3.0), axis=-1)
        assert torch.allclose(out, torch.full((2, 5), 0.2))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_softmax_rows_sum_to_one(self, vals):
        out = softmax(torch.tensor([vals], dtype=torch.float64), axis=-1)
        assert torch.all(out >= 0)
        assert abs(out.sum().item() - 1.0) < 1e-6

    def test_softmax_large_logits_stable(self):
        out = softmax(torch.tensor([1000.0, 1000.0]), axis=0)
        assert torch.allclose(out, torch.tensor([0.5, 0.5]))

    def test_softmax_bad_axis(self):
        with pytest.raises(IndexError, match="axis"):
            softmax(torch.zeros(2, 2), axis=3)

    def test_layernorm_statistics(self):
        x = torch.randn(2, 6, 3, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64) * 5 + 2
        out = layernorm(x, axis=1)
        assert out.mean(1).abs().max() < 1e-5
        assert (out.var(1, unbiased=False) - 1).abs().max() < 1e-5

    def test_layernorm_gain_bias(self):
        x = torch.randn(1, 4, 2, 2)
        g, b = torch.rand(4), torch.rand(4)
        out = layernorm(x, g, b, axis=1)
        base = layernorm(x, axis=1)
        assert torch.allclose(out, base * g.view(1, 4, 1, 1) + b.view(1, 4, 1, 1), atol=1e-6)

    def test_resize_constant(self):
        x = torch.full((1, 2, 4, 6), 0.37)
        assert torch.allclose(bilinear_resize(x, 2), torch.full((1, 2, 8, 12), 0.37))
        assert torch.allclose(bilinear_resize(x, 0.5), torch.full((1, 2, 2, 3), 0.37))

    def test_resize_up_matches_half_pixel_interpolation(self):
        x = torch.rand(1, 1, 3, 5, dtype=torch.float64)
        up = bilinear_resize(x, 2)
        for i in range(6):
            for j in range(10):
                # Output pixel centres map back to (i + 0.5) / 2 - 0.5, clamped at the edges.
                y = min(max((i + 0.5) / 2 - 0.5, 0.0), 2.0)
                xx = min(max((j + 0.5) / 2 - 0.5, 0.0), 4.0)
                assert up[0, 0, i, j].item() == pytest.approx(bilinear_scalar(x[0, 0].numpy(), y, xx), abs=1e-12)

    def test_resize_bad_scale(self):
        with pytest.raises(ValueError):
            bilinear_resize(torch.zeros(1, 1, 4, 4), 3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5))
    def test_window_partition_roundtrip(self, b, m, nh, nw, c):
        x = torch.randn(b, nh * m, nw * m, c)
        tokens = window_partition(x, m)
        assert tokens.shape == (b * nh * nw, m * m, c)
        assert torch.equal(window_merge(tokens, m, b, nh * m, nw * m), x)

    def test_window_partition_contents(self):
        x = torch.arange(16.0).view(1, 4, 4, 1)
        tokens = window_partition(x, 2)
        assert tokens[0, :, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
        assert tokens[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]

    def test_window_partition_indivisible(self):
        with pytest.raises(ValueError):
            window_partition(torch.zeros(1, 5, 4, 1), 2)


class TestGradcheck:
    def test_linear_layer_passes(self):
        gen = torch.Generator().manual_seed(3)
        x = torch.randn(4, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(8, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        rep = gradcheck(lambda x, w: x @ w, [x, w], name="linear", names=["x", "w"])
        assert rep.passed
        assert set(rep.per_input) == {"x", "w"}

    def test_detects_wrong_backward(self):
        class BadSquare(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return x * x

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * 2.1 * x

        x = torch.rand(5, dtype=torch.float64, requires_grad=True) + 0.5
        rep = gradcheck(BadSquare.apply, [x])
        assert not rep.passed
        # Norm-wise: max|2.1x - 2x| / max|2x| = 0.05.
        assert rep.max_rel_error == pytest.approx(0.05, rel=1e-6)

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            gradcheck(lambda x: x, [torch.zeros(2, requires_grad=True)])

    def test_nonfinite_reported(self):
        x = torch.tensor([0.0, 1.0], dtype=torch.float64, requires_grad=True)
        with pytest.raises(NonFiniteError):
            gradcheck(lambda x: 1 / x, [x])

    def test_sampled_coordinates(self):
        x = torch.rand(50, dtype=torch.float64, requires_grad=True)
        rep = gradcheck(lambda x: x.sin(), [x], samples=7)
        assert rep.passed and rep.checked == 7

    def test_kink_skipping(self):
        # Two coordinates within h of the ReLU kink; step halving exposes both.
        x = torch.tensor([0.3, 0.5, -0.5, 5e-5, -3e-5], dtype=torch.float64, requires_grad=True)
        strict = gradcheck(torch.relu, [x])
        assert not strict.passed
        lenient = gradcheck(torch.relu, [x], skip_kinks=True)
        assert lenient.skipped == 2 and lenient.checked == 3
        assert lenient.max_rel_error < 1e-9

    def test_check_finite(self):
        check_finite(torch.ones(3), "ok")
        with pytest.raises(NonFiniteError, match="here"):
            check_finite(torch.tensor([1.0, math.inf]), "here")
