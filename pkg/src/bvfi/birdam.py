"""Bidirectional recurrent deformable alignment over the interpolated sequence."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .deform import DeformAlign, OffsetHeads
from .layers import FusionHead, ResidualBlock, SymmetricFusionHead, conv

__all__ = ["SequenceFeatures", "RDAU", "BiRDAM", "ABLATIONS"]

# Temporal-fusion ablation variants: (long_term, align).
ABLATIONS = {
    "A": (False, False),
    "B": (False, True),
    "C": (True, False),
    "D": (True, True),
}


@dataclass
class SequenceFeatures:
    """Features on a uniform time grid (times in units of the input frame spacing)."""

    times: list[Fraction]
    feats: list[Tensor]

    def __post_init__(self):
        if len(self.times) != len(self.feats):
            raise ValueError("times and feats differ in length")
        if not self.feats:
            raise ValueError("empty sequence")
        steps = {b - a for a, b in zip(self.times, self.times[1:])}
        if len(steps) > 1 or any(s <= 0 for s in steps):
            raise ValueError(f"times must be strictly increasing with constant spacing: {self.times}")
        shape = self.feats[0].shape
        if any(f.shape != shape for f in self.feats):
            raise ValueError("all features in a sequence must share one shape")

    def reversed(self) -> "SequenceFeatures":
        return SequenceFeatures([-t for t in reversed(self.times)], list(reversed(self.feats)))


class RDAU(nn.Module):
    """One recurrent step: align the hidden state to the current feature, then fuse.

    Returns ``(hidden, current)``; both come from separate fusion heads over
    ``[F_t, aligned_hidden]``.
    """

    def __init__(self, channels: int, kernel: int = 3, groups: int = 8, align: bool = True):
        super().__init__()
        self.use_align = align
        if align:
            self.align = DeformAlign(channels, kernel, groups)
            self.conv1 = conv(2 * channels, channels)
            self.conv2 = conv(channels, channels)
            self.block = ResidualBlock(channels)
            self.heads = OffsetHeads(channels, self.align.cfg)
        self.hidden_head = FusionHead(channels, 2)
        self.current_head = FusionHead(channels, 2)

    def forward(self, feat: Tensor, hidden: Tensor) -> tuple[Tensor, Tensor]:
        if feat.shape != hidden.shape:
            raise ValueError(f"feature {tuple(feat.shape)} and hidden {tuple(hidden.shape)} differ")
        if self.use_align:
            x = F.leaky_relu(self.conv1(torch.cat([feat, hidden], dim=1)), 0.1)
            x = self.block(F.leaky_relu(self.conv2(x), 0.1))
            hidden = self.align(hidden, *self.heads(x))
        return self.hidden_head(feat, hidden), self.current_head(feat, hidden)


class BiRDAM(nn.Module):
    """Forward and backward recurrent branches sharing one RDAU, fused per position.

    ``long_term=False`` restricts each position to its immediate neighbours
    (a window of three frames), ``align=False`` skips deformable alignment.
    """

    def __init__(self, channels: int, kernel: int = 3, groups: int = 8,
                 long_term: bool = True, align: bool = True):
        super().__init__()
        self.long_term = long_term
        self.rdau = RDAU(channels, kernel, groups, align)
        self.fuse = SymmetricFusionHead(channels)

    @classmethod
    def ablation(cls, name: str, channels: int, **kw) -> "BiRDAM":
        long_term, align = ABLATIONS[name]
        return cls(channels, long_term=long_term, align=align, **kw)

    def _branch(self, feats: Sequence[Tensor]) -> list[Tensor]:
        hidden = torch.zeros_like(feats[0])
        out = []
        for f in feats:
            hidden, cur = self.rdau(f, hidden)
            out.append(cur)
        return out

    def _short_branch(self, feats: Sequence[Tensor]) -> list[Tensor]:
        out = []
        for k, f in enumerate(feats):
            hidden = torch.zeros_like(f)
            if k > 0:
                hidden, _ = self.rdau(feats[k - 1], hidden)
            out.append(self.rdau(f, hidden)[1])
        return out

    def forward(self, feats: Sequence[Tensor]) -> list[Tensor]:
        if not feats:
            raise ValueError("bidirectional fusion needs at least one frame")
        branch = self._branch if self.long_term else self._short_branch
        fwd = branch(feats)
        bwd = branch(feats[::-1])[::-1]
        return [self.fuse(a, b) for a, b in zip(fwd, bwd)]

    def fuse_sequence(self, seq: SequenceFeatures) -> SequenceFeatures:
        return SequenceFeatures(list(seq.times), self.forward(seq.feats))
