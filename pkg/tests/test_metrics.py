import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bvfi.metrics import PSNR_CAP, EvalReport, FrameScore, psnr, ssim
from oracles import psnr_oracle, ssim_windows


class TestPSNR:
    def test_identical_is_capped(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == PSNR_CAP == 100.0

    def test_one_level_offset(self):
        a = np.random.default_rng(1).random((8, 8, 3)) * 0.9
        assert psnr(a, a + 1 / 255) == pytest.approx(20 * np.log10(255), abs=1e-6)
        assert psnr(a, a + 1 / 255) == pytest.approx(48.1308, abs=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((6, 7, 3)), rng.random((6, 7, 3))
        assert abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-6

    def test_accepts_tensors(self):
        a = torch.rand(1, 3, 5, 5)
        assert psnr(a, a.clone()) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical(self):
        a = np.random.default_rng(2).random((16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_is_lower(self):
        a = np.random.default_rng(3).random((16, 16, 3))
        assert ssim(a, 1 - a) < 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_window_oracle(self, seed):
        rng = np.random.default_rng(10 + seed)
        a = rng.random((16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_windows(a, b)) < 1e-6

    def test_channel_first_and_grey(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((12, 13, 3)), rng.random((12, 13, 3))
        assert ssim(a, b) == pytest.approx(ssim(a.transpose(2, 0, 1), b.transpose(2, 0, 1)), abs=1e-12)
        assert abs(ssim(a[..., 0], b[..., 0]) - ssim_windows(a[..., 0], b[..., 0])) < 1e-6

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((11, 12)), rng.random((11, 12))
        s = ssim(a, b)
        assert -1.0 <= s <= 1.0
        assert s == pytest.approx(ssim(b, a), abs=1e-12)


class TestReport:
    def sample(self):
        rep = EvalReport()
        for i, (t, p, s) in enumerate([(0.0, 30.0, 0.9), (0.5, 27.0, 0.8), (1.0, 31.0, 0.92),
                                       (1.5, 26.0, 0.7), (2.0, 32.0, 0.95)]):
            rep.add(FrameScore(i, t, "deblur" if t == int(t) else "interp", p, s))
        return rep

    def test_aggregation_identity(self):
        agg = self.sample().aggregates()
        nd, ni = agg["deblur"]["count"], agg["interp"]["count"]
        for metric in ("psnr", "ssim"):
            weighted = (nd * agg["deblur"][metric] + ni * agg["interp"][metric]) / (nd + ni)
            assert agg["comprehensive"][metric] == pytest.approx(weighted, abs=1e-12)
        assert agg["deblur"]["psnr"] == pytest.approx(31.0)
        assert agg["interp"]["psnr"] == pytest.approx(26.5)

    def test_order_independent(self):
        rep = self.sample()
        shuffled = EvalReport()
        for f in reversed(rep.frames):
            shuffled.add(f)
        for g in ("deblur", "interp", "comprehensive"):
            assert shuffled.aggregates()[g]["psnr"] == pytest.approx(rep.aggregates()[g]["psnr"], abs=1e-12)

    def test_csv_roundtrip(self, tmp_path):
        rep = self.sample()
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "frame_index,time,role,psnr,ssim"
        back = EvalReport.read_csv(tmp_path / "r.csv")
        assert [(f.frame_index, f.role) for f in back.frames] == [(f.frame_index, f.role) for f in rep.frames]
        assert back.mean("psnr") == pytest.approx(rep.mean("psnr"))

    def test_from_frames_identical(self):
        imgs = [np.random.default_rng(i).random((12, 12, 3)) for i in range(5)]
        rep = EvalReport.from_frames(imgs, imgs, [k / 2 for k in range(5)])
        assert [f.role for f in rep.frames] == ["deblur", "interp", "deblur", "interp", "deblur"]
        assert all(f.psnr == 100.0 and f.ssim == pytest.approx(1.0) for f in rep.frames)

    def test_bad_role(self):
        with pytest.raises(ValueError):
            FrameScore(0, 0.0, "other", 1.0, 1.0)
