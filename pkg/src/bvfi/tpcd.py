"""Temporal pyramid-cascading-deformable interpolation.

Two feature pyramids and a target time t in [0, 1] produce the feature of
the unseen frame at t.  Each source is deformably sampled toward t with
offsets estimated coarse-to-fine from ``[F_src, F_other, t]``; the two
time-aligned features are then merged by a fusion layer.

Motion modes: ``"dconv"`` (default, G=8 K=3 deformable sampling),
``"flow"`` (G=1 K=1, offsets act as a flow field and masks as occlusion
maps) and ``"none"`` (the estimator predicts the aligned feature directly).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .deform import DeformAlign, OffsetHeads
from .layers import FusionHead, ResidualBlock, conv
from .numerics import bilinear_resize

LEVELS = 3

__all__ = ["PyramidFeatures", "PyramidBuilder", "OffsetEstimator", "TPCD", "check_time",
           "upsample_fields"]


def check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time parameter must lie in [0, 1], got {t}")
    return t


@dataclass
class PyramidFeatures:
    """Three feature levels, each half the spatial size of the previous."""

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != LEVELS:
            raise ValueError(f"expected {LEVELS} pyramid levels, got {len(self.levels)}")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if coarse.shape[-2] * 2 != fine.shape[-2] or coarse.shape[-1] * 2 != fine.shape[-1]:
                raise ValueError(f"level shapes {tuple(fine.shape)} -> {tuple(coarse.shape)} do not halve")

    def __getitem__(self, level: int) -> Tensor:
        """1-based level access, ``p[1]`` is full resolution."""
        return self.levels[level - 1]

    @staticmethod
    def cat(pyramids: Sequence["PyramidFeatures"]) -> "PyramidFeatures":
        return PyramidFeatures([torch.cat(ls, dim=0) for ls in zip(*(p.levels for p in pyramids))])

    def repeat(self, n: int) -> "PyramidFeatures":
        return PyramidFeatures([lv.repeat(n, 1, 1, 1) for lv in self.levels])


class PyramidBuilder(nn.Module):
    """Level 1 is the input; levels 2, 3 come from stride-2 conv + residual block."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = nn.ModuleList([conv(channels, channels, stride=2) for _ in range(LEVELS - 1)])
        self.blocks = nn.ModuleList([ResidualBlock(channels) for _ in range(LEVELS - 1)])

    def forward(self, feat: Tensor) -> PyramidFeatures:
        h, w = feat.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"feature size {h}×{w} must be divisible by 4 for a 3-level pyramid")
        levels = [feat]
        for down, block in zip(self.down, self.blocks):
            levels.append(block(F.leaky_relu(down(levels[-1]), 0.1)))
        return PyramidFeatures(levels)


def upsample_fields(offset: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    """Carry coarse fields one level down: ×2 resize, offsets doubled."""
    return bilinear_resize(offset, 2) * 2, bilinear_resize(mask, 2)


def time_channel(like: Tensor, t: Tensor) -> Tensor:
    """Broadcast per-sample times ``t`` (shape B) to a B×1×H×W constant map."""
    return t.to(like.dtype).view(-1, 1, 1, 1).expand(like.shape[0], 1, *like.shape[2:])


class OffsetEstimator(nn.Module):
    """Per-level estimator: 2 convs, 2 residual blocks, offset and mask heads.

    Below the top level the upsampled coarser fields enter through a 1×1
    squeeze conv and are concatenated ahead of the second conv.

    In ``"none"`` motion mode the heads are replaced by a single conv that
    outputs a feature map, and the cascaded input is the coarser feature.
    """

    def __init__(self, channels: int, align: DeformAlign | None, top: bool):
        super().__init__()
        self.top = top
        self.conv1 = conv(2 * channels + 1, channels)
        if align is None:
            cascade = channels
        else:
            cascade = align.cfg.offset_channels + align.cfg.mask_channels
        # Cascaded fields (2·G·K² + G·K² channels) are first squeezed to C.
        self.squeeze = None if top else conv(cascade, channels, kernel=1)
        self.conv2 = conv(channels if top else 2 * channels, channels)
        self.blocks = nn.Sequential(ResidualBlock(channels), ResidualBlock(channels))
        if align is None:
            self.heads = None
            self.feature = conv(channels, channels)
        else:
            self.heads = OffsetHeads(channels, align.cfg)

    def trunk(self, f_src: Tensor, f_other: Tensor, t: Tensor, coarser: Tensor | None) -> Tensor:
        x = F.leaky_relu(self.conv1(torch.cat([f_src, f_other, time_channel(f_src, t)], dim=1)), 0.1)
        if not self.top:
            if coarser is None:
                raise ValueError("non-top pyramid level needs the cascaded coarser fields")
            x = torch.cat([x, F.leaky_relu(self.squeeze(coarser), 0.1)], dim=1)
        x = F.leaky_relu(self.conv2(x), 0.1)
        return self.blocks(x)

    def forward(self, f_src: Tensor, f_other: Tensor, t: Tensor,
                coarser: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        if f_src.shape != f_other.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_src.shape)} vs {tuple(f_other.shape)}")
        cascade = None
        if coarser is not None:
            cascade = torch.cat(upsample_fields(*coarser), dim=1)
        return self.heads(self.trunk(f_src, f_other, t, cascade))


class TPCD(nn.Module):
    """Time-conditioned alignment plus the two-direction fusion layer.

    One parameter set serves both directions (source 0 toward t and source
    1 toward 1 - t).
    """

    def __init__(self, channels: int, kernel: int = 3, groups: int = 8, motion: str = "dconv"):
        super().__init__()
        if motion not in ("dconv", "flow", "none"):
            raise ValueError(f"unknown motion mode {motion!r}")
        self.motion = motion
        self.aligns = nn.ModuleList()
        self.estimators = nn.ModuleList()
        for level in range(1, LEVELS + 1):
            align = None if motion == "none" else DeformAlign(channels, kernel, groups, flow=motion == "flow")
            self.estimators.append(OffsetEstimator(channels, align, top=level == LEVELS))
            if align is not None:
                self.aligns.append(align)
        self.cascade_fuse = nn.ModuleList([conv(2 * channels, channels, kernel=1) for _ in range(LEVELS - 1)])
        self.fuse = FusionHead(channels, 2)

    def estimate_offsets(self, level: int, f_src: Tensor, f_other: Tensor, t: Tensor,
                         coarser: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        return self.estimators[level - 1](f_src, f_other, t, coarser)

    def align(self, src: PyramidFeatures, other: PyramidFeatures, t: Tensor) -> Tensor:
        """Sample ``src`` toward time ``t`` (per-sample tensor of shape B); level-1 result."""
        fields = None
        aligned = None
        for level in range(LEVELS, 0, -1):
            est = self.estimators[level - 1]
            if self.motion == "none":
                coarse = None if aligned is None else bilinear_resize(aligned, 2)
                cur = est.feature(est.trunk(src[level], other[level], t, coarse))
            else:
                fields = est(src[level], other[level], t, fields)
                cur = self.aligns[level - 1](src[level], *fields)
                if aligned is not None:
                    up = bilinear_resize(aligned, 2)
                    cur = self.cascade_fuse[level - 1](torch.cat([cur, up], dim=1))
            aligned = F.leaky_relu(cur, 0.1) if level > 1 else cur
        return aligned

    def interpolate(self, p0: PyramidFeatures, p1: PyramidFeatures, times: Sequence[float]) -> list[Tensor]:
        """Features at every requested time, all directions batched together."""
        if not times:
            return []
        ts = [check_time(t) for t in times]
        b = p0[1].shape[0]
        n = len(ts)
        src = PyramidFeatures.cat([p0.repeat(n), p1.repeat(n)])
        other = PyramidFeatures.cat([p1.repeat(n), p0.repeat(n)])
        tvec = torch.tensor([t for t in ts for _ in range(b)] + [1 - t for t in ts for _ in range(b)],
                            dtype=p0[1].dtype)
        aligned = self.align(src, other, tvec)
        a0, a1 = aligned.split(n * b, dim=0)
        fused = self.fuse(a0, a1)
        return list(fused.split(b, dim=0))

    def forward(self, p0: PyramidFeatures, p1: PyramidFeatures, t: float) -> Tensor:
        return self.interpolate(p0, p1, [t])[0]
