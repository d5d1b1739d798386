"""Small building blocks reused across the network stages."""
from __future__ import annotations

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .numerics import kaiming_uniform_


def conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
         scale: float = 1.0, zero: bool = False) -> nn.Conv2d:
    """Same-padded conv with Kaiming-uniform weights and zero bias."""
    layer = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
    if zero:
        nn.init.zeros_(layer.weight)
    else:
        kaiming_uniform_(layer.weight, scale)
    nn.init.zeros_(layer.bias)
    return layer


class ResidualBlock(nn.Module):
    """conv-ReLU-conv with an identity shortcut (no normalization)."""

    def __init__(self, channels: int, res_scale: float = 0.1):
        super().__init__()
        self.conv1 = conv(channels, channels, scale=res_scale)
        self.conv2 = conv(channels, channels, scale=res_scale)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class FusionHead(nn.Module):
    """Adaptive fusion of ``n_inputs`` feature maps: 1×1 conv, ReLU, 1×1 conv."""

    def __init__(self, channels: int, n_inputs: int = 2):
        super().__init__()
        self.conv1 = conv(n_inputs * channels, channels, kernel=1)
        self.conv2 = conv(channels, channels, kernel=1)

    def forward(self, *feats: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(torch.cat(feats, dim=1))))


class SymmetricFusionHead(nn.Module):
    """Fusion of two maps that is exactly invariant to swapping them.

    The first 1×1 conv carries one weight block applied to each input; the
    per-input responses are summed before the ReLU, and float addition
    commutes, so ``f(a, b)`` and ``f(b, a)`` agree bit for bit.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv(channels, channels, kernel=1)
        self.conv2 = conv(channels, channels, kernel=1)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        w, bias = self.conv1.weight, self.conv1.bias
        mixed = F.conv2d(a, w) + F.conv2d(b, w) + bias.view(1, -1, 1, 1)
        return self.conv2(F.relu(mixed))
