"""PSNR, SSIM and per-frame quality reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["PSNR_CAP", "psnr", "ssim", "gaussian_window", "FrameScore", "EvalReport"]

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10·log10(1 / MSE) for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the first two axes of H×W×C."""
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def _channels_last(x: np.ndarray) -> np.ndarray:
    """Accept H×W, H×W×3, or 3×H×W (and leading batch dims of 1)."""
    while x.ndim > 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 2:
        return x[..., None]
    if x.ndim == 3 and x.shape[0] in (1, 3) and x.shape[-1] not in (1, 3):
        return np.moveaxis(x, 0, -1)
    if x.ndim != 3:
        raise ValueError(f"unsupported image shape {x.shape}")
    return x


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11×11 Gaussian window (σ=1.5), range 1.0.

    Local statistics are taken over windows fully inside the image; the
    SSIM map is averaged over positions and channels.
    """
    a, b = _pair(a, b)
    a, b = _channels_last(a), _channels_last(b)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    time: float
    role: str          # "deblur" for t in {0, 1}, "interp" otherwise
    psnr: float
    ssim: float

    def __post_init__(self):
        if self.role not in ("deblur", "interp"):
            raise ValueError(f"unknown frame role {self.role!r}")


@dataclass
class EvalReport:
    frames: list[FrameScore] = field(default_factory=list)

    HEADER = ("frame_index", "time", "role", "psnr", "ssim")

    def add(self, score: FrameScore) -> None:
        self.frames.append(score)

    def _group(self, role: str | None) -> list[FrameScore]:
        return [f for f in self.frames if role is None or f.role == role]

    def mean(self, metric: str, role: str | None = None) -> float:
        """Mean of ``metric`` over a role group (``None`` = comprehensive); NaN if empty."""
        vals = [getattr(f, metric) for f in self._group(role)]
        return float(np.mean(vals)) if vals else float("nan")

    def aggregates(self) -> dict[str, dict[str, float]]:
        return {name: {"psnr": self.mean("psnr", role), "ssim": self.mean("ssim", role),
                       "count": len(self._group(role))}
                for name, role in (("deblur", "deblur"), ("interp", "interp"), ("comprehensive", None))}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.HEADER)
            for f in self.frames:
                wr.writerow([f.frame_index, repr(f.time), f.role, repr(f.psnr), repr(f.ssim)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([FrameScore(int(r["frame_index"]), float(r["time"]), r["role"],
                               float(r["psnr"]), float(r["ssim"])) for r in rows])

    @classmethod
    def from_frames(cls, preds: Iterable, gts: Iterable, times: Iterable[float]) -> "EvalReport":
        rep = cls()
        for i, (p, g, t) in enumerate(zip(preds, gts, times)):
            frac = t - math.floor(t)
            role = "deblur" if frac == 0.0 else "interp"
            rep.add(FrameScore(i, float(t), role, psnr(p, g), ssim(p, g)))
        return rep
