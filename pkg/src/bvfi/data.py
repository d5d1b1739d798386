"""Blur synthesis, the moving-shapes toy dataset, storage layout and patch sampling.

Images are float32 ``H×W×3`` arrays in [0, 1].  On disk a sequence is a
directory holding ``sharp/frame_%06d.png`` (high-fps), optionally
``blur/frame_%06d.png`` and a ``manifest.txt`` of ``key=value`` lines.
"""
from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "BlurSpec", "Disc", "Box", "Texture", "Pan", "ToyScene", "TrainingSample", "SequenceData",
    "synthesize_blur", "gt_index", "intermediate_gt_index", "num_blurry",
    "random_scene", "render_frame", "render_sequence", "make_toy_dataset",
    "read_png", "write_png", "read_frames", "write_frames", "read_manifest", "write_manifest",
    "load_sequence", "load_dataset", "synth_blur_dir", "augment", "sample_patch", "sample_window",
]


@dataclass(frozen=True)
class BlurSpec:
    window: int = 11
    stride: int = 8

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"blur window must be a positive odd number, got {self.window}")
        if self.stride < 1:
            raise ValueError(f"blur stride must be >= 1, got {self.stride}")


def num_blurry(n_sharp: int, spec: BlurSpec) -> int:
    return (n_sharp - spec.window) // spec.stride + 1


def gt_index(j: int, spec: BlurSpec) -> int:
    """Index of the sharp frame at the centre of blurry frame ``j``'s exposure."""
    return spec.stride * j + (spec.window - 1) // 2


def intermediate_gt_index(j: int, k: int, factor: int, spec: BlurSpec) -> int:
    """Sharp frame for intermediate ``k`` of ``factor`` between blurry ``j`` and ``j+1``."""
    return gt_index(j, spec) + round(k * spec.stride / factor)


def synthesize_blur(sharp: Sequence[np.ndarray], spec: BlurSpec = BlurSpec()) -> tuple[list[np.ndarray], list[int]]:
    """Box-average ``spec.window`` consecutive sharp frames every ``spec.stride`` frames.

    Returns the blurry frames (float32) and, for each, the index of its
    ground-truth sharp frame.  Sums are taken in float64 and the quotient
    is rounded once to float32.
    """
    n = len(sharp)
    if n < spec.window:
        raise ValueError(f"need at least {spec.window} sharp frames, got {n}")
    stack = np.asarray(sharp, dtype=np.float64)
    blurry, gts = [], []
    for j in range(num_blurry(n, spec)):
        lo = spec.stride * j
        blurry.append((stack[lo:lo + spec.window].sum(axis=0) / spec.window).astype(np.float32))
        gts.append(gt_index(j, spec))
    return blurry, gts


# ---------------------------------------------------------------- toy scenes

@dataclass(frozen=True)
class Disc:
    radius: float
    color: tuple[float, float, float]
    start: tuple[float, float]          # (y, x) at frame 0
    velocity: tuple[float, float]       # px per high-fps frame
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 60.0
    phase: float = 0.0

    def center(self, t: float) -> tuple[float, float]:
        s = math.sin(2 * math.pi * t / self.period + self.phase)
        return (self.start[0] + self.velocity[0] * t + self.amplitude[0] * s,
                self.start[1] + self.velocity[1] * t + self.amplitude[1] * s)

    def coverage(self, yy: np.ndarray, xx: np.ndarray, t: float) -> np.ndarray:
        cy, cx = self.center(t)
        dist = np.hypot(yy - cy, xx - cx)
        return np.clip(self.radius - dist + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class Box(Disc):
    half: tuple[float, float] = (4.0, 6.0)
    angle: float = 0.0
    spin: float = 0.0                   # radians per high-fps frame

    def coverage(self, yy: np.ndarray, xx: np.ndarray, t: float) -> np.ndarray:
        cy, cx = self.center(t)
        a = self.angle + self.spin * t
        ca, sa = math.cos(a), math.sin(a)
        dy, dx = yy - cy, xx - cx
        u = np.abs(ca * dx + sa * dy) - self.half[1]
        v = np.abs(-sa * dx + ca * dy) - self.half[0]
        outside = np.hypot(np.maximum(u, 0), np.maximum(v, 0))
        sd = outside + np.minimum(np.maximum(u, v), 0)
        return np.clip(0.5 - sd, 0.0, 1.0)


@dataclass(frozen=True)
class Texture:
    """Plane waves over a base tint, evaluated analytically so sub-pixel shifts are exact."""

    base: tuple[float, float, float]
    waves: tuple[tuple[float, float, float, tuple[float, float, float]], ...]  # (freq, angle, phase, rgb amp)

    def render(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        img = np.empty(yy.shape + (3,))
        img[:] = self.base
        for f, theta, phase, amp in self.waves:
            wave = np.sin(2 * math.pi * f * (math.cos(theta) * xx + math.sin(theta) * yy) + phase)
            img += wave[..., None] * np.asarray(amp)
        return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class Pan:
    """Camera motion: background offset (y, x) at frame t, linear plus sinusoidal."""

    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 60.0
    phase: float = 0.0

    def offset(self, t: float) -> tuple[float, float]:
        s = math.sin(2 * math.pi * t / self.period + self.phase)
        return (self.velocity[0] * t + self.amplitude[0] * s, self.velocity[1] * t + self.amplitude[1] * s)


@dataclass
class ToyScene:
    height: int
    width: int
    background: Texture
    pan: Pan = field(default_factory=Pan)
    objects: list[Disc] = field(default_factory=list)


def _texture(rng: np.random.Generator) -> Texture:
    waves = []
    for _ in range(5):
        waves.append((float(rng.uniform(0.03, 0.15)), float(rng.uniform(0, math.pi)),
                      float(rng.uniform(0, 2 * math.pi)), tuple(float(a) for a in rng.uniform(0.03, 0.1, size=3))))
    return Texture(tuple(float(c) for c in rng.uniform(0.3, 0.6, size=3)), tuple(waves))


def random_scene(rng: np.random.Generator, height: int, width: int,
                 n_objects: tuple[int, int] = (3, 5), speed: tuple[float, float] = (0.4, 1.2),
                 pan_speed: tuple[float, float] = (0.2, 0.6)) -> ToyScene:
    """Discs and spinning boxes with linear plus sinusoidal trajectories over a panning texture."""
    ang = rng.uniform(0, 2 * math.pi)
    sp = rng.uniform(*pan_speed)
    pan = Pan(velocity=(sp * math.sin(ang), sp * math.cos(ang)),
              amplitude=tuple(float(a) for a in rng.uniform(0, 3, size=2)),
              period=float(rng.uniform(40, 120)), phase=float(rng.uniform(0, 2 * math.pi)))
    scene = ToyScene(height, width, _texture(rng), pan)
    for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
        sp = rng.uniform(*speed)
        ang = rng.uniform(0, 2 * math.pi)
        common = dict(
            color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
            start=(float(rng.uniform(0.15, 0.85) * height), float(rng.uniform(0.15, 0.85) * width)),
            velocity=(sp * math.sin(ang), sp * math.cos(ang)),
            amplitude=tuple(float(a) for a in rng.uniform(0, 4, size=2)),
            period=float(rng.uniform(40, 120)),
            phase=float(rng.uniform(0, 2 * math.pi)),
        )
        if rng.random() < 0.5:
            scene.objects.append(Disc(radius=float(rng.uniform(4, 10)), **common))
        else:
            scene.objects.append(Box(radius=0.0, half=(float(rng.uniform(3, 7)), float(rng.uniform(4, 10))),
                                     angle=float(rng.uniform(0, math.pi)),
                                     spin=float(rng.uniform(-0.05, 0.05)), **common))
    return scene


def render_frame(scene: ToyScene, t: float) -> np.ndarray:
    yy, xx = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64)
    oy, ox = scene.pan.offset(t)
    img = scene.background.render(yy - oy, xx - ox)
    for obj in scene.objects:
        a = obj.coverage(yy, xx, t)[..., None]
        img = img * (1 - a) + np.asarray(obj.color) * a
    return img.astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, returned as float32 in [0, 1]."""
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def render_sequence(scene: ToyScene, n_frames: int) -> list[np.ndarray]:
    return [quantize(render_frame(scene, t)) for t in range(n_frames)]


# ------------------------------------------------------------------ storage

def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def frame_name(i: int) -> str:
    return f"frame_{i:06d}.png"


def write_frames(directory: str | Path, frames: Sequence[np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_png(directory / frame_name(i), f)


def read_frames(directory: str | Path) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("frame_*.png"))
    if not paths:
        paths = sorted(Path(directory).glob("*.png"))
    return [read_png(p) for p in paths]


def write_manifest(path: str | Path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line in {path}: {line!r}")
        out[key.strip()] = value.strip()
    return out


def _blur_manifest(fps: float, spec: BlurSpec, gts: Sequence[int], extra: dict | None = None) -> dict:
    entries = {"fps": f"{fps:g}", "blur_window": spec.window, "blur_stride": spec.stride,
               "blur_fps": f"{fps / spec.stride:g}", "gt_index": ",".join(map(str, gts))}
    entries.update(extra or {})
    return entries


def make_toy_dataset(out: str | Path, count: int, size: tuple[int, int] = (96, 96), seed: int = 0,
                     blurry_per_sequence: int = 8, spec: BlurSpec = BlurSpec(), fps: float = 240.0) -> list[Path]:
    """Render ``count`` 240-fps sequences and their blurred 30-fps versions."""
    h, w = size
    if h % 8 or w % 8:
        raise ValueError(f"toy frame size {h}×{w} must be divisible by 8")
    out = Path(out)
    n_frames = spec.stride * (blurry_per_sequence - 1) + spec.window
    dirs = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scene = random_scene(rng, h, w)
        sharp = render_sequence(scene, n_frames)
        blurry, gts = synthesize_blur(sharp, spec)
        d = out / f"seq_{i:04d}"
        write_frames(d / "sharp", sharp)
        write_frames(d / "blur", blurry)
        write_manifest(d / "manifest.txt", _blur_manifest(fps, spec, gts, {"seed": seed, "index": i}))
        dirs.append(d)
    return dirs


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "sharp").is_dir() or any(root.glob("*.png")):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir())


def synth_blur_dir(src: str | Path, dst: str | Path, spec: BlurSpec = BlurSpec(), fps: float = 240.0) -> list[Path]:
    """Blur every sharp sequence under ``src`` into the paired layout under ``dst``."""
    src, dst = Path(src), Path(dst)
    written = []
    for seq in _sequence_dirs(src):
        sharp_dir = seq / "sharp" if (seq / "sharp").is_dir() else seq
        sharp = read_frames(sharp_dir)
        blurry, gts = synthesize_blur(sharp, spec)
        name = seq.name if seq != src else src.name
        d = dst / name
        (d / "sharp").mkdir(parents=True, exist_ok=True)
        for p in sorted(sharp_dir.glob("*.png")):
            shutil.copyfile(p, d / "sharp" / p.name)
        write_frames(d / "blur", blurry)
        manifest_fps = fps
        if (seq / "manifest.txt").exists():
            manifest_fps = float(read_manifest(seq / "manifest.txt").get("fps", fps))
        write_manifest(d / "manifest.txt", _blur_manifest(manifest_fps, spec, gts))
        written.append(d)
    return written


@dataclass
class SequenceData:
    sharp: list[np.ndarray]
    blurry: list[np.ndarray]
    spec: BlurSpec
    name: str = ""


def load_sequence(d: str | Path) -> SequenceData:
    d = Path(d)
    man = read_manifest(d / "manifest.txt")
    spec = BlurSpec(int(man.get("blur_window", 11)), int(man.get("blur_stride", 8)))
    return SequenceData(read_frames(d / "sharp"), read_frames(d / "blur"), spec, d.name)


def load_dataset(root: str | Path) -> list[SequenceData]:
    seqs = [load_sequence(d) for d in _sequence_dirs(Path(root))]
    if not seqs:
        raise FileNotFoundError(f"no sequences under {root}")
    return seqs


# ------------------------------------------------------------------ sampling

@dataclass
class TrainingSample:
    """Four blurry inputs and the sharp targets at 0, the intermediates and 1."""

    blurry: list[np.ndarray]
    targets: list[np.ndarray]
    times: list[float]
    crop: tuple[int, int] = (0, 0)
    transform: tuple[int, int] = (0, 0)     # (quarter turns, flip: 0 none / 1 horizontal / 2 vertical)


def augment(img: np.ndarray, rot: int, flip: int) -> np.ndarray:
    out = np.rot90(img, k=rot, axes=(0, 1))
    if flip == 1:
        out = out[:, ::-1]
    elif flip == 2:
        out = out[::-1]
    return np.ascontiguousarray(out)


def sample_window(seq: SequenceData, j: int, factor: int) -> TrainingSample:
    """Full-frame sample centred on blurry pair (j, j+1)."""
    n = len(seq.blurry)
    if not 1 <= j <= n - 3:
        raise IndexError(f"blurry pair index {j} needs neighbours in a {n}-frame sequence")
    idx = [gt_index(j, seq.spec)]
    idx += [intermediate_gt_index(j, k, factor, seq.spec) for k in range(1, factor)]
    idx.append(gt_index(j + 1, seq.spec))
    return TrainingSample(blurry=[seq.blurry[i] for i in range(j - 1, j + 3)],
                          targets=[seq.sharp[i] for i in idx],
                          times=[k / factor for k in range(1, factor)])


def sample_patch(sample: TrainingSample, size: int = 192, augment_: bool = True,
                 rng: np.random.Generator | None = None, crop: tuple[int, int] | None = None) -> TrainingSample:
    """One shared crop (and one shared rotation/flip) applied to every frame."""
    h, w = sample.blurry[0].shape[:2]
    if h < size or w < size:
        raise ValueError(f"frame {h}×{w} smaller than patch {size}")
    rng = rng if rng is not None else np.random.default_rng()
    if crop is None:
        crop = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
    y, x = crop
    rot, flip = (int(rng.integers(0, 4)), int(rng.integers(0, 3))) if augment_ else (0, 0)

    def cut(img: np.ndarray) -> np.ndarray:
        return augment(img[y:y + size, x:x + size], rot, flip)

    return TrainingSample([cut(b) for b in sample.blurry], [cut(t) for t in sample.targets],
                          list(sample.times), (y, x), (rot, flip))
