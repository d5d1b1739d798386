import pytest
import torch

from bvfi.numerics import gradcheck
from bvfi.tpcd import TPCD, PyramidBuilder, PyramidFeatures, check_time, upsample_fields


def randomize(module, seed, std=0.05):
    """Give zero-initialised layers random weights so every path is exercised."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() > 1 and not p.any():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module


def pyramids(c=8, size=16, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    builder = PyramidBuilder(c).to(dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    f0 = torch.randn(1, c, size, size, generator=gen, dtype=dtype)
    f1 = torch.randn(1, c, size, size, generator=gen, dtype=dtype)
    return builder, builder(f0), builder(f1)


class TestPyramid:
    def test_level_shapes(self):
        _, p0, _ = pyramids()
        assert [tuple(p0[l].shape[-2:]) for l in (1, 2, 3)] == [(16, 16), (8, 8), (4, 4)]

    def test_level_one_is_input(self):
        builder = PyramidBuilder(4)
        f = torch.rand(2, 4, 8, 12)
        assert torch.equal(builder(f)[1], f)

    def test_constant_input_finite(self):
        p = PyramidBuilder(8)(torch.full((1, 8, 16, 16), 0.7))
        assert all(torch.isfinite(lv).all() for lv in p.levels)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            PyramidBuilder(4)(torch.zeros(1, 4, 10, 8))

    def test_type_invariants(self):
        with pytest.raises(ValueError):
            PyramidFeatures([torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4)])
        with pytest.raises(ValueError):
            PyramidFeatures([torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 2)])

    def test_gradcheck(self):
        torch.manual_seed(3)
        builder = PyramidBuilder(2).double()
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
        rep = gradcheck(lambda x: torch.cat([lv.flatten() for lv in builder(x).levels]), [x],
                        h=1e-6, skip_kinks=True)
        assert rep.passed, rep


class TestOffsets:
    def test_channel_counts(self):
        tp = TPCD(8, groups=8)
        _, p0, p1 = pyramids()
        t = torch.tensor([0.5])
        off, mask = tp.estimate_offsets(3, p0[3], p1[3], t)
        assert off.shape[1] == 144 and mask.shape[1] == 72

    def test_depends_on_t(self):
        tp = randomize(TPCD(8), 1)
        _, p0, _ = pyramids()
        a = tp.estimate_offsets(3, p0[3], p0[3], torch.tensor([0.0]))
        b = tp.estimate_offsets(3, p0[3], p0[3], torch.tensor([1.0]))
        assert not torch.allclose(a[0], b[0])

    def test_mask_in_unit_interval(self):
        tp = randomize(TPCD(8), 2, std=1.0)
        _, p0, p1 = pyramids()
        _, mask = tp.estimate_offsets(3, p0[3], p1[3], torch.tensor([0.3]))
        assert mask.min() >= 0 and mask.max() <= 1

    def test_top_level_needs_no_cascade_and_lower_levels_do(self):
        tp = TPCD(8)
        _, p0, p1 = pyramids()
        t = torch.tensor([0.5])
        tp.estimate_offsets(3, p0[3], p1[3], t)
        with pytest.raises(ValueError, match="coarser"):
            tp.estimate_offsets(2, p0[2], p1[2], t)

    def test_shape_mismatch(self):
        tp = TPCD(8)
        with pytest.raises(ValueError):
            tp.estimate_offsets(3, torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 8), torch.tensor([0.5]))

    def test_cascade_rescaling(self):
        off = torch.full((1, 2, 3, 3), 1.25)
        off[:, 1] = -0.5
        mask = torch.full((1, 1, 3, 3), 0.3)
        up_off, up_mask = upsample_fields(off, mask)
        assert up_off.shape[-2:] == (6, 6)
        assert torch.allclose(up_off[:, 0], torch.full((1, 6, 6), 2.5))
        assert torch.allclose(up_off[:, 1], torch.full((1, 6, 6), -1.0))
        assert torch.allclose(up_mask, mask.new_full((1, 1, 6, 6), 0.3))


class TestInterpolate:
    def test_output_shape_and_count(self):
        tp = TPCD(8)
        _, p0, p1 = pyramids()
        feats = tp.interpolate(p0, p1, [k / 8 for k in range(1, 8)])
        assert len(feats) == 7 and all(f.shape == (1, 8, 16, 16) for f in feats)
        assert len(tp.interpolate(p0, p1, [0.5])) == 1

    def test_zero_init_stable(self):
        tp = TPCD(8)
        _, p0, p1 = pyramids()
        assert torch.isfinite(tp(p0, p1, 0.5)).all()

    @pytest.mark.parametrize("motion", ["flow", "none"])
    def test_motion_modes(self, motion):
        tp = randomize(TPCD(8, motion=motion), 4)
        _, p0, p1 = pyramids()
        out = tp(p0, p1, 0.25)
        assert out.shape == (1, 8, 16, 16) and torch.isfinite(out).all()

    def test_bad_time(self):
        with pytest.raises(ValueError):
            check_time(1.5)
        _, p0, p1 = pyramids()
        with pytest.raises(ValueError):
            TPCD(8)(p0, p1, -0.1)

    def test_batched_times_match_single(self):
        tp = randomize(TPCD(8), 5)
        _, p0, p1 = pyramids()
        with torch.no_grad():
            many = tp.interpolate(p0, p1, [0.25, 0.5])
            one = tp(p0, p1, 0.5)
        assert torch.allclose(many[1], one, atol=1e-5)

    def test_parameters_independent_of_time_count(self):
        tp = TPCD(8)
        n = sum(p.numel() for p in tp.parameters())
        _, p0, p1 = pyramids()
        tp.interpolate(p0, p1, [k / 8 for k in range(1, 8)])
        assert sum(p.numel() for p in tp.parameters()) == n

    def test_swap_symmetry_with_symmetric_fusion(self):
        tp = randomize(TPCD(8), 6)
        with torch.no_grad():
            w = tp.fuse.conv1.weight
            w[:, 8:] = w[:, :8]
        _, p0, p1 = pyramids()
        with torch.no_grad():
            a = tp(p0, p1, 0.375)
            b = tp(p1, p0, 0.625)
        assert torch.allclose(a, b, atol=1e-5)

    def test_gradient_reaches_both_sources(self):
        tp = randomize(TPCD(8), 7)
        _, p0, p1 = pyramids()
        lv0 = [lv.detach().requires_grad_() for lv in p0.levels]
        lv1 = [lv.detach().requires_grad_() for lv in p1.levels]
        tp(PyramidFeatures(lv0), PyramidFeatures(lv1), 0.4).square().sum().backward()
        assert lv0[0].grad.abs().sum() > 0 and lv1[0].grad.abs().sum() > 0

    def test_gradcheck_three_levels(self):
        torch.manual_seed(8)
        tp = randomize(TPCD(2, groups=1), 8, std=0.2).double()
        gen = torch.Generator().manual_seed(9)
        levels = [torch.randn(1, 2, s, s, generator=gen, dtype=torch.float64, requires_grad=True)
                  for s in (8, 4, 2)]
        other = [torch.randn(1, 2, s, s, generator=gen, dtype=torch.float64) for s in (8, 4, 2)]

        def fn(a, b, c):
            return tp(PyramidFeatures([a, b, c]), PyramidFeatures(other), 0.3)

        rep = gradcheck(fn, levels, h=1e-6, skip_kinks=True, samples=40)
        assert rep.passed, rep
