"""Differentiable primitives shared by every stage of the network.

Tensors are plain ``torch.Tensor`` objects in NCHW layout and reverse-mode
differentiation is torch's define-by-run autograd.  The operators here that
carry sampling semantics (bilinear sampling, ×2 resizing, window
partitioning) are written out explicitly rather than delegated, so their
boundary behaviour is fixed by this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "NonFiniteError",
    "GradcheckReport",
    "check_finite",
    "conv2d",
    "grid_sample_bilinear",
    "softmax",
    "layernorm",
    "bilinear_resize",
    "window_partition",
    "window_merge",
    "kaiming_uniform_",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


def check_finite(x: Tensor, where: str) -> Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise NonFiniteError(f"non-finite value in {where} at index {bad}")
    return x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, output size ``(H + 2p - K) // s + 1``."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def grid_sample_bilinear(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` at absolute pixel coordinates.

    ``coords`` is B×2×H'×W' with channel 0 the row (y) and channel 1 the
    column (x).  Each output is the bilinear blend of its four integer
    neighbours; neighbours outside the image contribute zero.
    """
    if x.dim() != 4 or coords.dim() != 4 or coords.shape[1] != 2 or coords.shape[0] != x.shape[0]:
        raise ValueError(f"grid_sample_bilinear: bad shapes {tuple(x.shape)}, {tuple(coords.shape)}")
    check_finite(coords, "grid_sample_bilinear coords")
    return sample_points(x, coords[:, 0], coords[:, 1])


def sample_points(x: Tensor, y: Tensor, xx: Tensor) -> Tensor:
    """Bilinear zero-padded lookup of ``x`` (B×C×H×W) at pixel positions y, xx (B×H'×W')."""
    h, w = x.shape[-2:]
    # torch's fused kernel takes [-1, 1] coordinates; in its unaligned
    # convention pixel p sits at (2p + 1) / size - 1.
    grid = torch.stack([(2 * xx + 1) / w - 1, (2 * y + 1) / h - 1], dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.dim() <= axis < x.dim():
        raise IndexError(f"softmax axis {axis} out of range for {x.dim()}-D input")
    return torch.softmax(x, dim=axis)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (channels of BCHW by default)."""
    if not -x.dim() <= axis < x.dim():
        raise IndexError(f"layernorm axis {axis} out of range for {x.dim()}-D input")
    axis = axis % x.dim()
    if axis == x.dim() - 1:
        return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)
    moved = x.movedim(axis, -1)
    return F.layer_norm(moved, (moved.shape[-1],), gain, bias, eps).movedim(-1, axis)


def bilinear_resize(x: Tensor, scale: int | float) -> Tensor:
    """×2 bilinear upsampling (``scale=2``) or ×2 downsampling (``scale=0.5``).

    Half-pixel centres: an output pixel ``i`` maps to source coordinate
    ``(i + 0.5) / scale - 0.5``, clamped to the image.  Downsampling by 2
    therefore averages 2×2 blocks exactly.
    """
    if scale == 2:
        return _upsample2(x)
    if scale == 0.5:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"×2 downsampling needs even dims, got {h}×{w}")
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(dim=(3, 5))
    raise ValueError(f"unsupported resize scale {scale}")


def _upsample2(x: Tensor) -> Tensor:
    # Along one axis, output 2i takes 0.75*x[i] + 0.25*x[i-1], 2i+1 takes
    # 0.75*x[i] + 0.25*x[i+1], with edge replication.
    def along(t: Tensor, dim: int) -> Tensor:
        n = t.shape[dim]
        prev = torch.cat([t.narrow(dim, 0, 1), t.narrow(dim, 0, n - 1)], dim=dim)
        nxt = torch.cat([t.narrow(dim, 1, n - 1), t.narrow(dim, n - 1, 1)], dim=dim)
        even = 0.75 * t + 0.25 * prev
        odd = 0.75 * t + 0.25 * nxt
        stacked = torch.stack([even, odd], dim=dim + 1)
        shape = list(t.shape)
        shape[dim] = 2 * n
        return stacked.reshape(shape)

    return along(along(x, 2), 3)


def window_partition(x: Tensor, m: int) -> Tensor:
    """Channels-last B×H×W×C → (B·nW)×M²×C tokens, windows in row-major order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ValueError(f"spatial dims {h}×{w} not divisible by window {m}")
    x = x.reshape(b, h // m, m, w // m, m, c)
    return x.transpose(2, 3).reshape(-1, m * m, c)


def window_merge(tokens: Tensor, m: int, b: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`, back to B×H×W×C."""
    c = tokens.shape[-1]
    x = tokens.reshape(b, h // m, w // m, m, m, c)
    return x.transpose(2, 3).reshape(b, h, w, c)


def kaiming_uniform_(weight: Tensor, scale: float = 1.0) -> Tensor:
    """He-uniform initialization (gain sqrt(2) over fan-in), optionally scaled down."""
    fan_in = weight[0].numel()
    bound = scale * math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    per_input: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    checked: int = 0
    skipped: int = 0
    max_skip_fraction: float = 0.1

    @property
    def passed(self) -> bool:
        total = self.checked + self.skipped
        return self.max_rel_error < self.tol and self.skipped <= self.max_skip_fraction * max(total, 1)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.skipped} of {self.checked + self.skipped} coordinates at kinks skipped)" if self.skipped else ""
        return f"{status} {self.name}: max relative error {self.max_rel_error:.3e}{extra}"


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0,
              h: float = 1e-4, tol: float = 1e-4, name: str = "op",
              names: Sequence[str] | None = None, samples: int | None = None,
              skip_kinks: bool = False, kink_tol: float = 1e-5) -> GradcheckReport:
    """Compare autograd gradients against central finite differences.

    The output is reduced to a scalar through a fixed random projection so
    the whole Jacobian is exercised.  For every input with
    ``requires_grad`` the error is ``max|analytic - numeric| / max|numeric|``.
    Inputs must be float64.  ``samples`` limits the check to that many
    seeded random coordinates per input (all coordinates by default).

    Piecewise-smooth compositions (ReLU, bilinear sampling) have kinks that
    a ±h step can straddle.  With ``skip_kinks`` each coordinate is also
    differenced at h/2; the two estimates agree to O(h²) on smooth
    stretches, so a disagreement above ``kink_tol`` (relative to the largest
    numeric derivative, ten times below the default pass tolerance) marks a straddled kink
    and the coordinate is excluded (and counted in ``skipped``).
    """
    inputs = [t.detach().clone().requires_grad_(t.requires_grad) for t in inputs]
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("gradcheck requires float64 inputs")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]

    out = fn(*inputs)
    check_finite(out, name)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*args: Tensor) -> float:
        with torch.no_grad():
            y = fn(*args)
            check_finite(y, name)
            return float((y * proj).sum())

    (out * proj).sum().backward()
    report = GradcheckReport(name=name, max_rel_error=0.0, tol=tol)
    base = [a.detach() for a in inputs]
    for k, (label, t) in enumerate(zip(names, inputs)):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else torch.zeros_like(t)
        flat = base[k].view(-1)
        coords = range(flat.numel())
        if samples is not None and samples < flat.numel():
            coords = torch.randperm(flat.numel(), generator=gen)[:samples].tolist()
            analytic = analytic.reshape(-1)[coords]
        def central(i: int, step: float) -> float:
            orig = flat[i].item()
            flat[i] = orig + step
            fp = scalar(*base)
            flat[i] = orig - step
            fm = scalar(*base)
            flat[i] = orig
            return (fp - fm) / (2 * step)

        picked = [central(i, h) for i in coords]
        numeric = torch.tensor(picked, dtype=torch.float64).view_as(analytic)
        scale = numeric.abs().max().item()
        keep = torch.ones(numeric.numel(), dtype=torch.bool)
        if skip_kinks:
            for j, i in enumerate(coords):
                if abs(central(i, h / 2) - picked[j]) > kink_tol * max(scale, 1e-12):
                    keep[j] = False
        report.checked += int(keep.sum())
        report.skipped += int((~keep).sum())
        diff = (analytic - numeric).reshape(-1)[keep]
        err = diff.abs().max().item() / max(scale, 1e-12) if diff.numel() else 0.0
        report.per_input[label] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
