"""Modulated deformable convolution and its flow-warp special case.

Offset channel layout (checkpoints depend on it): for group ``g`` and
kernel tap ``k`` (row-major over the K×K grid) the displacement occupies
channels ``g*2*K*K + 2*k`` (dy) and ``g*2*K*K + 2*k + 1`` (dx).  Mask
channel ``g*K*K + k`` modulates the same sample.  Offsets are in pixels of
the map they act on.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import conv
from .numerics import kaiming_uniform_, sample_points

__all__ = ["DeformConfig", "deform_conv2d", "flow_warp", "DeformConv2d", "DeformAlign"]


@dataclass(frozen=True)
class DeformConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    groups: int = 8
    padding: int | None = None

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if self.groups < 1 or self.in_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} is not divisible by groups={self.groups}")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    @property
    def offset_channels(self) -> int:
        return 2 * self.groups * self.kernel ** 2

    @property
    def mask_channels(self) -> int:
        return self.groups * self.kernel ** 2


def deform_conv2d(x: Tensor, offset: Tensor, mask: Tensor | None, weight: Tensor,
                  bias: Tensor | None, cfg: DeformConfig) -> Tensor:
    """Deformable convolution (stride 1).

    For output pixel p, group g and tap k the group-g channels of ``x`` are
    bilinearly sampled at ``p - pad + tap_k + offset[g, k]``, multiplied by
    ``mask[g, k]`` and then contracted with the K×K weights.  ``mask=None``
    means an all-ones mask.
    """
    b, c, h, w = x.shape
    k, g, pad = cfg.kernel, cfg.groups, cfg.pad
    kk = k * k
    if c != cfg.in_channels:
        raise ValueError(f"input has {c} channels, config expects {cfg.in_channels}")
    if weight.shape != (cfg.out_channels, c, k, k):
        raise ValueError(f"weight shape {tuple(weight.shape)} != {(cfg.out_channels, c, k, k)}")
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if offset.shape != (b, cfg.offset_channels, ho, wo):
        raise ValueError(f"offset shape {tuple(offset.shape)} != {(b, cfg.offset_channels, ho, wo)}")
    if mask is not None and mask.shape != (b, cfg.mask_channels, ho, wo):
        raise ValueError(f"mask shape {tuple(mask.shape)} != {(b, cfg.mask_channels, ho, wo)}")

    # Sampling grid in the [-1, 1] convention of the fused kernel: pixel p
    # maps to (2p + 1) / size - 1, so grid = base + offset * (2 / size).
    base = _base_grid(k, pad, h, w, ho, wo, x.dtype, x.device)
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=x.dtype, device=x.device)
    off_xy = offset.view(b * g, kk, 2, ho, wo).permute(0, 1, 3, 4, 2).flip(-1)
    grid = torch.addcmul(base, off_xy, scale).view(b * g, kk * ho, wo, 2)
    cols = F.grid_sample(x.reshape(b * g, c // g, h, w), grid, mode="bilinear",
                         padding_mode="zeros", align_corners=False)
    cols = cols.view(b, g, c // g, kk, ho * wo)
    if mask is not None:
        cols = cols * mask.view(b, g, 1, kk, ho * wo)
    cols = cols.reshape(b, c * kk, ho * wo)
    out = torch.matmul(weight.reshape(cfg.out_channels, c * kk), cols)
    if bias is not None:
        out = out + bias.view(1, -1, 1)
    return out.view(b, cfg.out_channels, ho, wo)


@functools.lru_cache(maxsize=64)
def _base_grid(k: int, pad: int, h: int, w: int, ho: int, wo: int,
               dtype: torch.dtype, device: torch.device) -> Tensor:
    """K²×Ho×Wo×2 normalized (x, y) positions of every undeformed tap."""
    ys = torch.arange(ho, dtype=torch.float64).view(1, ho, 1) - pad
    xs = torch.arange(wo, dtype=torch.float64).view(1, 1, wo) - pad
    ty, tx = torch.meshgrid(torch.arange(k, dtype=torch.float64),
                            torch.arange(k, dtype=torch.float64), indexing="ij")
    py = (ys + ty.reshape(-1, 1, 1)).expand(k * k, ho, wo)
    px = (xs + tx.reshape(-1, 1, 1)).expand(k * k, ho, wo)
    grid = torch.stack([(2 * px + 1) / w - 1, (2 * py + 1) / h - 1], dim=-1)
    return grid.to(dtype=dtype, device=device)


def flow_warp(x: Tensor, flow: Tensor, occlusion_mask: Tensor | None = None) -> Tensor:
    """Backward-warp ``x`` by a per-pixel (dy, dx) flow, optionally masked.

    This is the deformable convolution with one group, a 1×1 kernel and an
    identity weight: each channel is sampled once at ``p + flow(p)``.
    """
    b, c, h, w = x.shape
    if flow.shape != (b, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} != {(b, 2, h, w)}")
    if occlusion_mask is not None and occlusion_mask.shape != (b, 1, h, w):
        raise ValueError(f"mask shape {tuple(occlusion_mask.shape)} != {(b, 1, h, w)}")
    ys = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    xs = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    out = sample_points(x, ys + flow[:, 0], xs + flow[:, 1])
    if occlusion_mask is not None:
        out = out * occlusion_mask
    return out


class DeformConv2d(nn.Module):
    """Deformable conv layer owning its K×K weights; offsets/masks are inputs."""

    def __init__(self, cfg: DeformConfig):
        super().__init__()
        self.cfg = cfg
        self.weight = nn.Parameter(torch.empty(cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel))
        self.bias = nn.Parameter(torch.zeros(cfg.out_channels))
        kaiming_uniform_(self.weight)

    def forward(self, x: Tensor, offset: Tensor, mask: Tensor | None) -> Tensor:
        return deform_conv2d(x, offset, mask, self.weight, self.bias, self.cfg)


class OffsetHeads(nn.Module):
    """Zero-initialized heads mapping a feature to (offset, sigmoid mask)."""

    def __init__(self, channels: int, cfg: DeformConfig):
        super().__init__()
        self.offset = conv(channels, cfg.offset_channels, zero=True)
        self.mask = conv(channels, cfg.mask_channels, zero=True)

    def forward(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        return self.offset(feat), torch.sigmoid(self.mask(feat))


class DeformAlign(nn.Module):
    """Deformable sampling of ``src`` given predicted offsets and masks.

    With ``flow=True`` the layer degenerates to masked flow warping (one
    group, 1×1 kernel, identity weight), the optical-flow ablation.
    """

    def __init__(self, channels: int, kernel: int = 3, groups: int = 8, flow: bool = False):
        super().__init__()
        self.flow = flow
        if flow:
            self.cfg = DeformConfig(channels, channels, kernel=1, groups=1)
        else:
            self.cfg = DeformConfig(channels, channels, kernel=kernel, groups=groups)
            self.dconv = DeformConv2d(self.cfg)

    def forward(self, src: Tensor, offset: Tensor, mask: Tensor) -> Tensor:
        if self.flow:
            return flow_warp(src, offset, mask)
        return self.dconv(src, offset, mask)
