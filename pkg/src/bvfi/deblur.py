"""Taylor-unfolded deblurring with a windowed-attention U-network.

The interpolated feature is the zeroth-order term.  Each further order is
one more pass of the shared operator ``G``::

    g[0]   = feature
    g[k+1] = G(g[k]) + k * g[k]         for k = 0 .. n-1
    out    = g[0] + g[1] + ... + g[n]   (or g[0] + g[n] without accumulation)

``G`` is a U-shaped stack of transformer layers (``"transformer"``), or for
ablation a 20-block residual network (``"resnet"``) or the same U with
conv+ReLU stages (``"unet"``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import ResidualBlock, conv
from .numerics import (bilinear_resize, kaiming_uniform_, layernorm, softmax,
                       window_merge, window_partition)

__all__ = [
    "TaylorConfig", "TransformerConfig", "window_attention", "relative_position_index",
    "WindowMSA", "window_msa", "TransformerLayer", "TransformerStage", "TransformerG", "ResNetG", "UNetG", "TaylorDeblur",
    "build_operator",
]


@dataclass(frozen=True)
class TaylorConfig:
    n: int = 2
    accumulate: bool = True
    factorial: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"Taylor order must be >= 1, got {self.n}")


@dataclass(frozen=True)
class TransformerConfig:
    window: int = 4
    heads: int = 4
    depth: int = 2
    ffn_expansion: int = 2
    layers_per_stage: int = 2

    @property
    def multiple(self) -> int:
        """Spatial dims must be divisible by this."""
        return self.window * 2 ** self.depth


def relative_position_index(m: int) -> Tensor:
    """M²×M² index into a (2M-1)² bias table by relative (dy, dx)."""
    ys, xs = torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    dy = ys[:, None] - ys[None, :] + m - 1
    dx = xs[:, None] - xs[None, :] + m - 1
    return dy * (2 * m - 1) + dx


def window_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
                     return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d) + bias) v over the last two axes.

    q, k, v: (..., heads, N, d); bias broadcastable to (..., heads, N, N).
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class WindowMSA(nn.Module):
    """Multi-head self-attention inside non-overlapping M×M windows.

    Works on channels-last B×H×W×C maps.  Query, key and value projections
    are stored as one C×3C matrix; the output projection merges the heads.
    """

    def __init__(self, channels: int, heads: int, window: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels={channels} not divisible by heads={heads}")
        self.channels = channels
        self.heads = heads
        self.window = window
        bound = 1.0 / math.sqrt(channels)
        self.qkv = nn.Parameter(torch.empty(channels, 3 * channels).uniform_(-bound, bound))
        self.proj = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound))
        self.proj_bias = nn.Parameter(torch.zeros(channels))
        self.pos_bias = nn.Parameter(torch.empty((2 * window - 1) ** 2, heads).normal_(0.0, 0.02))
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)

    def position_bias(self) -> Tensor:
        """heads×M²×M² bias gathered from the relative-position table."""
        n = self.window ** 2
        return self.pos_bias[self.rel_index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)

    def forward(self, x: Tensor, return_weights: bool = False):
        b, h, w, c = x.shape
        m, nh = self.window, self.heads
        tokens = window_partition(x, m)
        bw, n, _ = tokens.shape
        q, k, v = (tokens @ self.qkv).reshape(bw, n, 3, nh, c // nh).permute(2, 0, 3, 1, 4)
        out, weights = window_attention(q, k, v, self.position_bias(), return_weights=True)
        out = out.transpose(1, 2).reshape(bw, n, c) @ self.proj + self.proj_bias
        y = window_merge(out, m, b, h, w)
        return (y, weights) if return_weights else y


def window_msa(x: Tensor, msa: WindowMSA) -> Tensor:
    """Window attention on a B×C×H×W map."""
    return msa(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class TransformerLayer(nn.Module):
    """Pre-norm block on channels-last maps: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, channels: int, heads: int, window: int, expansion: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.msa = WindowMSA(channels, heads, window)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn1 = nn.Linear(channels, expansion * channels)
        self.ffn2 = nn.Linear(expansion * channels, channels)
        for lin, scale in ((self.ffn1, 1.0), (self.ffn2, 0.5)):
            kaiming_uniform_(lin.weight, scale)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.msa(layernorm(x, self.norm1.weight, self.norm1.bias, axis=-1))
        return x + self.ffn2(F.gelu(self.ffn1(layernorm(x, self.norm2.weight, self.norm2.bias, axis=-1))))


class TransformerStage(nn.Module):
    """Transformer layers applied to a BCHW map in channels-last layout."""

    def __init__(self, channels: int, cfg: TransformerConfig):
        super().__init__()
        self.layers = nn.ModuleList([TransformerLayer(channels, cfg.heads, cfg.window, cfg.ffn_expansion)
                                     for _ in range(cfg.layers_per_stage)])

    def forward(self, x: Tensor) -> Tensor:
        x = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            x = layer(x)
        return x.permute(0, 3, 1, 2)


class ConvStage(nn.Module):
    """conv+ReLU replacement for a transformer stage (U-Net ablation)."""

    def __init__(self, channels: int, layers: int):
        super().__init__()
        self.convs = nn.ModuleList([conv(channels, channels, scale=0.5) for _ in range(layers)])

    def forward(self, x: Tensor) -> Tensor:
        for c in self.convs:
            x = x + F.relu(c(x))
        return x


class _UNet(nn.Module):
    """Shared U skeleton: stride-2 conv down, resize-conv up, additive skips."""

    def __init__(self, channels: int, cfg: TransformerConfig, make_stage):
        super().__init__()
        self.cfg = cfg
        widths = [channels * 2 ** i for i in range(cfg.depth + 1)]
        self.conv_in = conv(channels, channels)
        self.enc = nn.ModuleList([make_stage(wd) for wd in widths[:-1]])
        self.down = nn.ModuleList([conv(a, b, stride=2) for a, b in zip(widths, widths[1:])])
        self.bottleneck = make_stage(widths[-1])
        self.up = nn.ModuleList([conv(b, a) for a, b in zip(widths, widths[1:])])
        self.dec = nn.ModuleList([make_stage(wd) for wd in widths[:-1]])
        self.conv_out = conv(channels, channels, zero=True)

    def forward(self, g: Tensor) -> Tensor:
        h, w = g.shape[-2:]
        if h % self.cfg.multiple or w % self.cfg.multiple:
            raise ValueError(f"feature size {h}×{w} must be divisible by {self.cfg.multiple}; pad first")
        x = self.conv_in(g)
        skips = []
        for stage, down in zip(self.enc, self.down):
            x = stage(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for i in reversed(range(self.cfg.depth)):
            x = self.up[i](bilinear_resize(x, 2)) + skips[i]
            x = self.dec[i](x)
        return self.conv_out(x)


class TransformerG(_UNet):
    def __init__(self, channels: int, cfg: TransformerConfig = TransformerConfig()):
        for i in range(cfg.depth + 1):
            if (channels * 2 ** i) % cfg.heads:
                raise ValueError(f"channels {channels * 2 ** i} not divisible by heads={cfg.heads}")
        super().__init__(channels, cfg, lambda c: TransformerStage(c, cfg))


class UNetG(_UNet):
    def __init__(self, channels: int, cfg: TransformerConfig = TransformerConfig()):
        super().__init__(channels, cfg, lambda c: ConvStage(c, 2 * cfg.layers_per_stage))


class ResNetG(nn.Module):
    def __init__(self, channels: int, blocks: int = 20):
        super().__init__()
        self.conv_in = conv(channels, channels)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(blocks)])
        self.conv_out = conv(channels, channels, zero=True)

    def forward(self, g: Tensor) -> Tensor:
        return self.conv_out(self.blocks(self.conv_in(g)))


def build_operator(kind: str, channels: int, cfg: TransformerConfig) -> nn.Module:
    if kind == "transformer":
        return TransformerG(channels, cfg)
    if kind == "unet":
        return UNetG(channels, cfg)
    if kind == "resnet":
        return ResNetG(channels)
    raise ValueError(f"unknown deblurring network {kind!r}")


class TaylorDeblur(nn.Module):
    """Recursive Taylor-order refinement with a single shared operator."""

    def __init__(self, channels: int, taylor: TaylorConfig = TaylorConfig(),
                 transformer: TransformerConfig = TransformerConfig(), kind: str = "transformer"):
        super().__init__()
        self.taylor = taylor
        self.G = build_operator(kind, channels, transformer)

    def orders(self, feature: Tensor) -> list[Tensor]:
        """All terms g[0..n]."""
        terms = [feature]
        for k in range(self.taylor.n):
            terms.append(self.G(terms[k]) + k * terms[k])
        return terms

    def forward(self, feature: Tensor) -> Tensor:
        terms = self.orders(feature)
        if not self.taylor.accumulate:
            last = terms[-1] / math.factorial(self.taylor.n) if self.taylor.factorial else terms[-1]
            return terms[0] + last
        out = terms[0]
        for k, g in enumerate(terms[1:], start=1):
            out = out + (g / math.factorial(k) if self.taylor.factorial else g)
        return out


def zero_parameters_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
