"""End-to-end model: features → interpolation → temporal fusion → deblurring → images."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .birdam import BiRDAM
from .deblur import TaylorConfig, TaylorDeblur, TransformerConfig
from .layers import ResidualBlock, conv
from .numerics import check_finite
from .tpcd import TPCD, PyramidBuilder, check_time

__all__ = ["ModelConfig", "FrameSequence", "BVFINet", "uniform_times", "interpolate_video"]


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    factor: int = 2
    kernel: int = 3
    groups: int = 8
    extractor_blocks: int = 3
    motion: str = "dconv"
    long_term: bool = True
    align: bool = True
    deblur_net: str = "transformer"
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    taylor: TaylorConfig = field(default_factory=TaylorConfig)

    def __post_init__(self):
        if self.factor < 2:
            raise ValueError(f"interpolation factor must be >= 2 (T = factor - 1 >= 1), got {self.factor}")
        if self.channels % self.groups:
            raise ValueError(f"channels={self.channels} not divisible by groups={self.groups}")

    @property
    def times(self) -> list[float]:
        return uniform_times(self.factor)

    @property
    def pad_multiple(self) -> int:
        return math.lcm(4, self.transformer.multiple)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["transformer"] = TransformerConfig(**d.get("transformer", {}))
        d["taylor"] = TaylorConfig(**d.get("taylor", {}))
        return cls(**d)


def uniform_times(factor: int) -> list[float]:
    """Intermediate times 1/f, ..., (f-1)/f."""
    return [k / factor for k in range(1, factor)]


@dataclass
class FrameSequence:
    """Ordered images (each B×3×H×W in [0, 1]) with timestamps in seconds."""

    images: list[Tensor]
    fps: float
    timestamps: list[float] | None = None

    def __post_init__(self):
        if self.images and any(im.shape != self.images[0].shape for im in self.images):
            raise ValueError("all frames must share one shape")
        if self.timestamps is None:
            self.timestamps = [i / self.fps for i in range(len(self.images))]
        if len(self.timestamps) != len(self.images):
            raise ValueError("timestamps and images differ in length")

    def __len__(self) -> int:
        return len(self.images)


class BVFINet(nn.Module):
    """Four blurry frames in, sharp frames at {0} ∪ times ∪ {1} out."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.extract_in = conv(3, c)
        self.extract = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.extractor_blocks)])
        self.pyramid = PyramidBuilder(c)
        self.tpcd = TPCD(c, cfg.kernel, cfg.groups, cfg.motion)
        self.birdam = BiRDAM(c, cfg.kernel, cfg.groups, cfg.long_term, cfg.align)
        self.deblur = TaylorDeblur(c, cfg.taylor, cfg.transformer, cfg.deblur_net)
        self.recon = conv(c, 3)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def features(self, frames: Tensor) -> Tensor:
        return self.extract(F.leaky_relu(self.extract_in(frames), 0.1))

    def forward(self, blurry: Sequence[Tensor], times: Sequence[float] | None = None,
                clamp: bool = True) -> list[Tensor]:
        """Restore I_0, the frames at ``times`` and I_1 from B_-1, B_0, B_1, B_2."""
        if len(blurry) != 4:
            raise ValueError(f"expected four input frames, got {len(blurry)}")
        shape = blurry[0].shape
        if any(b.shape != shape for b in blurry) or len(shape) != 4 or shape[1] != 3:
            raise ValueError(f"input frames must share one B×3×H×W shape, got {[tuple(b.shape) for b in blurry]}")
        times = list(self.cfg.times if times is None else times)
        for t in times:
            if not 0.0 < check_time(t) < 1.0:
                raise ValueError(f"intermediate times must lie in (0, 1), got {t}")
        if times != sorted(times):
            raise ValueError("times must be sorted")

        b, _, h, w = shape
        m = self.cfg.pad_multiple
        ph, pw = (-h) % m, (-w) % m
        frames = torch.cat(list(blurry), dim=0)
        if ph or pw:
            frames = F.pad(frames, (0, pw, 0, ph), mode="replicate")
        feats = check_finite(self.features(frames), "feature extraction").split(b, dim=0)

        pyr = self.pyramid(torch.cat([feats[1], feats[2]], dim=0))
        p0 = type(pyr)([lv[:b] for lv in pyr.levels])
        p1 = type(pyr)([lv[b:] for lv in pyr.levels])
        mids = self.tpcd.interpolate(p0, p1, times)

        seq = [feats[0], feats[1], *mids, feats[2], feats[3]]
        fused = self.birdam(seq)[1:-1]
        check_finite(fused[0], "temporal fusion")

        deblurred = self.deblur(torch.cat(fused, dim=0))
        residual = self.recon(deblurred)
        residual = check_finite(residual, "reconstruction")[..., :h, :w]

        all_t = [0.0, *times, 1.0]
        outs = []
        for i, t in enumerate(all_t):
            blend = (1 - t) * blurry[1] + t * blurry[2]
            img = residual[i * b:(i + 1) * b] + blend
            outs.append(img.clamp(0.0, 1.0) if clamp else img)
        return outs


def interpolate_video(model: BVFINet, frames: FrameSequence, factor: int,
                      batch_windows: int = 1) -> FrameSequence:
    """Slide a 4-frame window over the video, emitting factor× the frame rate.

    Each central pair (j, j+1) contributes I_j and its factor-1
    intermediates; the final pair also contributes its right frame.  Edge
    frames are replicated to fill the window at both ends.
    """
    n = len(frames)
    if n < 4:
        raise ValueError(f"need at least 4 frames, got {n}")
    times = uniform_times(factor)
    imgs = frames.images
    out: list[Tensor] = []
    pairs = range(n - 1)
    with torch.no_grad():
        for start in range(0, len(pairs), batch_windows):
            chunk = pairs[start:start + batch_windows]
            window = [torch.cat([imgs[min(max(j + d, 0), n - 1)] for j in chunk], dim=0) for d in (-1, 0, 1, 2)]
            res = model(window, times)
            bsz = imgs[0].shape[0]
            for ci, j in enumerate(chunk):
                per = [r[ci * bsz:(ci + 1) * bsz] for r in res]
                out.extend(per[:-1])
                if j == n - 2:
                    out.append(per[-1])
    t0 = frames.timestamps[0]
    dt = (frames.timestamps[1] - frames.timestamps[0]) / factor
    stamps = [t0 + k * dt for k in range(len(out))]
    return FrameSequence(out, frames.fps * factor, stamps)


def output_times(factor: int, n_inputs: int) -> list[Fraction]:
    """Output positions in units of input spacing for :func:`interpolate_video`."""
    return [Fraction(k, factor) for k in range(factor * (n_inputs - 1) + 1)]
