"""Named finite-difference gradient checks for every differentiable building block."""
from __future__ import annotations

from typing import Callable

import torch

from .deblur import TaylorConfig, TransformerConfig, WindowMSA
from .deform import DeformConfig, deform_conv2d, flow_warp
from .numerics import (GradcheckReport, bilinear_resize, conv2d, gradcheck, grid_sample_bilinear,
                       layernorm, softmax)
from .pipeline import BVFINet, ModelConfig

__all__ = ["CASES", "run_case", "run_suite", "micro_model"]


def _rand(gen: torch.Generator, *shape: int, lo: float = -1.0, hi: float = 1.0) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo).requires_grad_()


def _conv2d(gen: torch.Generator, seed: int) -> GradcheckReport:
    x, w, b = _rand(gen, 2, 3, 5, 5), _rand(gen, 4, 3, 3, 3), _rand(gen, 4)
    return gradcheck(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), [x, w, b], seed,
                     name="conv2d", names=["input", "weight", "bias"])


def _grid_sample(gen: torch.Generator, seed: int) -> GradcheckReport:
    x = _rand(gen, 1, 2, 5, 5)
    # Coordinates straddle the border so the zero-padding branch is exercised.
    coords = _rand(gen, 1, 2, 4, 4, lo=-0.8, hi=4.8)
    return gradcheck(grid_sample_bilinear, [x, coords], seed, name="grid_sample", names=["input", "coords"])


def _deform(gen: torch.Generator, seed: int) -> GradcheckReport:
    cfg = DeformConfig(4, 3, kernel=3, groups=2)
    x = _rand(gen, 1, 4, 5, 5)
    off = _rand(gen, 1, cfg.offset_channels, 5, 5, lo=-2.0, hi=2.0)
    mask = _rand(gen, 1, cfg.mask_channels, 5, 5, lo=0.0, hi=1.0)
    w, b = _rand(gen, 3, 4, 3, 3), _rand(gen, 3)
    return gradcheck(lambda *a: deform_conv2d(*a, cfg), [x, off, mask, w, b], seed, name="deform_conv2d",
                     names=["input", "offset", "mask", "weight", "bias"])


def _flow_warp(gen: torch.Generator, seed: int) -> GradcheckReport:
    x = _rand(gen, 1, 2, 5, 5)
    flow = _rand(gen, 1, 2, 5, 5, lo=-1.5, hi=1.5)
    occ = _rand(gen, 1, 1, 5, 5, lo=0.0, hi=1.0)
    return gradcheck(flow_warp, [x, flow, occ], seed, name="flow_warp", names=["input", "flow", "mask"])


def _window_msa(gen: torch.Generator, seed: int) -> GradcheckReport:
    torch.manual_seed(seed)
    msa = WindowMSA(4, heads=2, window=2).double()
    x = _rand(gen, 1, 4, 4, 4)
    params = [p.detach().clone().requires_grad_() for p in (msa.qkv, msa.proj, msa.proj_bias, msa.pos_bias)]

    def fn(x, qkv, proj, proj_bias, pos_bias):
        return torch.func.functional_call(
            msa, {"qkv": qkv, "proj": proj, "proj_bias": proj_bias, "pos_bias": pos_bias}, (x,))

    return gradcheck(fn, [x, *params], seed, name="window_msa",
                     names=["input", "qkv", "proj", "proj_bias", "pos_bias"])


def _layernorm(gen: torch.Generator, seed: int) -> GradcheckReport:
    x, g, b = _rand(gen, 2, 6, 3, 3), _rand(gen, 6), _rand(gen, 6)
    return gradcheck(lambda x, g, b: layernorm(x, g, b, axis=1), [x, g, b], seed, name="layernorm",
                     names=["input", "gain", "bias"])


def _softmax(gen: torch.Generator, seed: int) -> GradcheckReport:
    return gradcheck(lambda x: softmax(x, axis=-1), [_rand(gen, 3, 7, lo=-3, hi=3)], seed, name="softmax")


def _resize(gen: torch.Generator, seed: int) -> GradcheckReport:
    x = _rand(gen, 1, 2, 4, 6)
    return gradcheck(lambda x: torch.cat([bilinear_resize(x, 2).flatten(), bilinear_resize(x, 0.5).flatten()]),
                     [x], seed, name="bilinear_resize")


def _charbonnier(gen: torch.Generator, seed: int) -> GradcheckReport:
    from .training import charbonnier_loss
    pred, gt = _rand(gen, 2, 3, 4, 4), _rand(gen, 2, 3, 4, 4)
    return gradcheck(charbonnier_loss, [pred, gt], seed, name="charbonnier", names=["pred", "gt"])


def micro_model(seed: int = 0) -> BVFINet:
    """C=8 float64 model with every zero-initialised weight randomised (offset and mask heads, conv_out)."""
    torch.manual_seed(seed)
    cfg = ModelConfig(channels=8, factor=2, groups=8, extractor_blocks=1,
                      transformer=TransformerConfig(window=4, heads=2, depth=2, layers_per_stage=1),
                      taylor=TaylorConfig(n=2))
    model = BVFINet(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() > 1 and not p.any():
                p.normal_(0.0, 0.05)
    return model


def _pipeline(gen: torch.Generator, seed: int) -> GradcheckReport:
    model = micro_model(seed)
    frames = [_rand(gen, 1, 3, 16, 16, lo=0.0, hi=1.0) for _ in range(4)]

    def fn(*blurry):
        return torch.stack(model(list(blurry), clamp=False))

    # About a third of input coordinates sit within 1e-4 of a ReLU or
    # bilinear-cell kink in this composition, so the step is 1e-6 here.
    return gradcheck(fn, frames, seed, h=1e-6, name="pipeline", names=["B_-1", "B_0", "B_1", "B_2"],
                     samples=24, skip_kinks=True)


CASES: dict[str, Callable[[torch.Generator, int], GradcheckReport]] = {
    "conv2d": _conv2d,
    "grid_sample": _grid_sample,
    "deform_conv2d": _deform,
    "flow_warp": _flow_warp,
    "window_msa": _window_msa,
    "layernorm": _layernorm,
    "softmax": _softmax,
    "bilinear_resize": _resize,
    "charbonnier": _charbonnier,
    "pipeline": _pipeline,
}


def run_case(name: str, seed: int = 0) -> GradcheckReport:
    if name not in CASES:
        raise KeyError(f"unknown gradcheck module {name!r}; choose from {sorted(CASES)}")
    gen = torch.Generator().manual_seed(seed)
    return CASES[name](gen, seed)


def run_suite(seed: int = 0, names=None) -> list[GradcheckReport]:
    return [run_case(n, seed) for n in (names or CASES)]
