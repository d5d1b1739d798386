"""Loss, optimizer, schedule, checkpoint format and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import SequenceData, TrainingSample, sample_patch, sample_window
from .deblur import TaylorConfig, TransformerConfig
from .metrics import EvalReport, FrameScore, psnr, ssim
from .numerics import NonFiniteError
from .pipeline import BVFINet, ModelConfig

__all__ = [
    "TrainConfig", "Checkpoint", "AdamState", "TrainingDiverged", "TrainResult",
    "charbonnier_loss", "adam_step", "cosine_lr", "clip_grad_norm", "smoothed",
    "build_model", "batch_tensors", "train", "evaluate", "baselines", "draw_batch", "load_config", "parse_config",
    "checkpoint_from_model", "load_model",
]

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ losses

def charbonnier_loss(pred: Tensor, gt: Tensor, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - gt)² + eps²))."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    return torch.sqrt((pred - gt) ** 2 + eps * eps).mean()


def cosine_lr(step: int, total: int, lr_max: float = 1e-4, lr_min: float = 1e-5) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises :class:`NonFiniteError` (before touching anything) if any gradient
    is NaN or infinite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(params[name].shape)} for {name}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name} at optimizer step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


def clip_grad_norm(grads: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ----------------------------------------------------------------- configs

@dataclass(frozen=True)
class TrainConfig:
    batch: int = 2
    patch: int = 192
    iterations: int = 5000
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 0
    eval_every: int = 500
    taylor_n: int = 2
    factor: int = 2
    grad_clip: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) must be below lr_max ({self.lr_max})")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch < 1 or self.patch < 1 or self.eval_every < 1:
            raise ValueError("batch, patch and eval_every must be positive")


_MODEL_KEYS = {"channels", "kernel", "groups", "extractor_blocks", "motion", "long_term", "align", "deblur_net"}
_TRANSFORMER_KEYS = {"window", "heads", "depth", "ffn_expansion", "layers_per_stage"}
_TAYLOR_KEYS = {"accumulate", "factorial"}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return type(like)(raw)


def parse_config(entries: dict[str, str]) -> tuple[TrainConfig, ModelConfig]:
    """Split flat ``key=value`` entries into training and model configs.

    Unknown keys are rejected.
    """
    tdef, mdef, xdef, ydef = TrainConfig(), ModelConfig(), TransformerConfig(), TaylorConfig()
    t, m, x, y = {}, {}, {}, {}
    for key, raw in entries.items():
        key = key.replace("-", "_")
        if key in {f.name for f in dataclasses.fields(TrainConfig)}:
            t[key] = _coerce(raw, getattr(tdef, key))
        elif key in _MODEL_KEYS:
            m[key] = _coerce(raw, getattr(mdef, key))
        elif key in _TRANSFORMER_KEYS:
            x[key] = _coerce(raw, getattr(xdef, key))
        elif key in _TAYLOR_KEYS:
            y[key] = _coerce(raw, getattr(ydef, key))
        else:
            raise ValueError(f"unknown config key {key!r}")
    tcfg = TrainConfig(**t)
    mcfg = ModelConfig(factor=tcfg.factor, transformer=TransformerConfig(**x),
                       taylor=TaylorConfig(n=tcfg.taylor_n, **y), **m)
    return tcfg, mcfg


def load_config(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    from .data import read_manifest
    return parse_config(read_manifest(path))


def config_text(tcfg: TrainConfig, mcfg: ModelConfig) -> str:
    """Flat key=value echo of both configs (the inverse of :func:`parse_config`)."""
    lines = [f"{k}={v}" for k, v in dataclasses.asdict(tcfg).items()]
    lines += [f"{k}={getattr(mcfg, k)}" for k in sorted(_MODEL_KEYS)]
    lines += [f"{k}={getattr(mcfg.transformer, k)}" for k in sorted(_TRANSFORMER_KEYS)]
    lines += [f"{k}={getattr(mcfg.taylor, k)}" for k in sorted(_TAYLOR_KEYS)]
    return "\n".join(lines) + "\n"


def build_model(mcfg: ModelConfig, seed: int = 0) -> BVFINet:
    torch.manual_seed(seed)
    return BVFINet(mcfg)


# --------------------------------------------------------------- checkpoint

_MAGIC = b"BVFI"
_VERSION = 1
# dtype tag -> (numpy dtype, little-endian)
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    """Ordered named arrays plus helpers for the model/optimizer view.

    Record names: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``,
    ``adam_step``, ``step``, ``best_val_psnr`` and ``config`` (UTF-8 bytes).
    """

    records: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = _VERSION

    # serialisation
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<II", self.version, len(self.records)))
        for name, arr in self.records.items():
            arr = np.asarray(arr)
            tag = _TAGS.get(arr.dtype.str)
            if tag is None:
                raise TypeError(f"record {name!r}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", tag, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:4]) != _MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, count = struct.unpack_from("<II", view, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        records = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            tag, ndim = struct.unpack_from("<BB", view, pos)
            pos += 2
            if tag not in _DTYPES:
                raise ValueError(f"record {name!r}: unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            dt = _DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(view):
                raise ValueError(f"record {name!r} truncated")
            records[name] = np.frombuffer(view[pos:pos + size], dtype=dt).reshape(dims).copy()
            pos += size
        if pos != len(view):
            raise ValueError(f"{len(view) - pos} trailing bytes after last record")
        return cls(records, version)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    # structured views
    @property
    def step(self) -> int:
        return int(self.records["step"][0]) if "step" in self.records else 0

    @property
    def config_text(self) -> str:
        return bytes(self.records["config"]).decode("utf-8") if "config" in self.records else ""

    def configs(self) -> tuple[TrainConfig, ModelConfig]:
        entries = {}
        for line in self.config_text.splitlines():
            k, _, v = line.partition("=")
            if k:
                entries[k] = v
        return parse_config(entries)

    def load_into(self, model: nn.Module, adam: AdamState | None = None) -> None:
        """Copy parameters (and optimizer moments) in; unknown or missing names are errors."""
        params = dict(model.named_parameters())
        stored = {k[len("param/"):] for k in self.records if k.startswith("param/")}
        unknown = stored - params.keys()
        if unknown:
            raise KeyError(f"checkpoint has unknown parameters: {sorted(unknown)}")
        missing = params.keys() - stored
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        known = {"step", "adam_step", "best_val_psnr", "config"}
        for k in self.records:
            head = k.split("/", 1)[0]
            if k not in known and head not in ("param", "adam_m", "adam_v"):
                raise KeyError(f"unknown checkpoint record {k!r}")
        with torch.no_grad():
            for name, p in params.items():
                arr = self.records[f"param/{name}"]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))
        if adam is not None:
            adam.step = int(self.records["adam_step"][0]) if "adam_step" in self.records else 0
            adam.m = {n: torch.from_numpy(self.records[f"adam_m/{n}"].copy())
                      for n in params if f"adam_m/{n}" in self.records}
            adam.v = {n: torch.from_numpy(self.records[f"adam_v/{n}"].copy())
                      for n in params if f"adam_v/{n}" in self.records}


def checkpoint_from_model(model: nn.Module, adam: AdamState | None = None, step: int = 0,
                          config: str = "", best_val_psnr: float = float("nan")) -> Checkpoint:
    rec: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        rec[f"param/{name}"] = p.detach().cpu().numpy().astype("<f4")
    if adam is not None:
        for name, _ in model.named_parameters():
            if name in adam.m:
                rec[f"adam_m/{name}"] = adam.m[name].cpu().numpy().astype("<f4")
                rec[f"adam_v/{name}"] = adam.v[name].cpu().numpy().astype("<f4")
        rec["adam_step"] = np.array([adam.step], dtype="<i8")
    rec["step"] = np.array([step], dtype="<i8")
    rec["best_val_psnr"] = np.array([best_val_psnr], dtype="<f8")
    rec["config"] = np.frombuffer(config.encode("utf-8"), dtype=np.uint8).copy()
    return Checkpoint(rec)


def load_model(path: str | Path) -> tuple[BVFINet, Checkpoint]:
    ckpt = Checkpoint.load(path)
    _, mcfg = ckpt.configs()
    model = BVFINet(mcfg)
    ckpt.load_into(model)
    model.eval()
    return model, ckpt


# --------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    val_psnr: dict[int, float]
    seconds: float


def batch_tensors(samples: Sequence[TrainingSample]) -> tuple[list[Tensor], list[Tensor]]:
    """Stack samples into four B×3×H×W inputs and per-time B×3×H×W targets."""
    def stack(frames):
        return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()

    inputs = [stack([s.blurry[i] for s in samples]) for i in range(4)]
    targets = [stack([s.targets[i] for s in samples]) for i in range(len(samples[0].targets))]
    return inputs, targets


def draw_batch(data: Sequence[SequenceData], cfg: TrainConfig, step: int) -> list[TrainingSample]:
    """Samples for ``step`` depend only on (seed, step), so resumed runs see the same data."""
    rng = np.random.default_rng([cfg.seed, step])
    out = []
    for _ in range(cfg.batch):
        seq = data[int(rng.integers(len(data)))]
        j = int(rng.integers(1, len(seq.blurry) - 2))
        out.append(sample_patch(sample_window(seq, j, cfg.factor), cfg.patch, cfg.augment, rng))
    return out


def total_loss(outputs: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Equally weighted sum of per-frame Charbonnier terms."""
    return sum(charbonnier_loss(o, t) for o, t in zip(outputs, targets))


def _diagnose(model: nn.Module) -> str:
    bad = []
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            bad.append(f"{name} (param)")
        elif p.grad is not None and not torch.isfinite(p.grad).all():
            bad.append(f"{name} (grad)")
    return ", ".join(bad) if bad else "all parameters and gradients finite"


def train(model: BVFINet, data: Sequence[SequenceData], cfg: TrainConfig, out_dir: str | Path | None = None,
          val_data: Sequence[SequenceData] | None = None, resume: Checkpoint | None = None,
          stop_after: int | None = None, config_echo: str | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run (or continue) training for ``cfg.iterations`` steps.

    Steps are numbered 1..iterations and step ``s`` uses lr ``cosine_lr(s-1)``.
    ``stop_after`` halts early (the schedule still spans ``cfg.iterations``).
    With ``out_dir`` set, ``metrics.csv``, ``last.ckpt`` and ``best.ckpt`` are written there.
    """
    if not data:
        raise ValueError("empty training set")
    if model.cfg.factor != cfg.factor:
        raise ValueError(f"model factor {model.cfg.factor} != training factor {cfg.factor}")
    echo = config_echo if config_echo is not None else config_text(cfg, model.cfg)
    params = dict(model.named_parameters())
    adam = AdamState()
    start = 0
    best = float("-inf")
    if resume is not None:
        resume.load_into(model, adam)
        start = resume.step
        prev = float(resume.records.get("best_val_psnr", np.array([np.nan]))[0])
        best = prev if math.isfinite(prev) else best
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        fresh = start == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss", "lr", "val_psnr"])

    losses: list[float] = []
    vals: dict[int, float] = {}
    t0 = time.perf_counter()
    model.train()
    try:
        for step in range(start + 1, end + 1):
            lr = cosine_lr(step - 1, cfg.iterations, cfg.lr_max, cfg.lr_min)
            inputs, targets = batch_tensors(draw_batch(data, cfg, step))
            for p in params.values():
                p.grad = None
            try:
                outputs = model(inputs, clamp=False)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}; {_diagnose(model)}") from exc
            loss = total_loss(outputs, targets)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"step {step}: loss is {float(loss)}; {_diagnose(model)}")
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if cfg.grad_clip > 0:
                clip_grad_norm(list(grads.values()), cfg.grad_clip)
            try:
                adam_step(params, grads, adam, lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}; {_diagnose(model)}") from exc
            lv = float(loss.detach())
            losses.append(lv)
            if on_step is not None:
                on_step(step, lv)

            val = ""
            if val_data and (step % cfg.eval_every == 0 or step == cfg.iterations):
                vp = evaluate(model, val_data, cfg.factor).mean("psnr")
                model.train()
                vals[step] = vp
                val = repr(vp)
                if out is not None and vp > best:
                    best = vp
                    checkpoint_from_model(model, adam, step, echo, best).save(out / "best.ckpt")
            if writer is not None:
                writer.writerow([step, repr(lv), repr(lr), val])
            if step % 100 == 0:
                log.info("step %d loss %.5f lr %.2e", step, lv, lr)
    finally:
        if fh is not None:
            fh.close()

    ckpt = checkpoint_from_model(model, adam, end, echo, best if math.isfinite(best) else float("nan"))
    if out is not None:
        ckpt.save(out / "last.ckpt")
    model.eval()
    return TrainResult(ckpt, losses, vals, time.perf_counter() - t0)


# -------------------------------------------------------------- evaluation

def evaluate(model: BVFINet, data: Sequence[SequenceData], factor: int, max_windows: int | None = None,
             crop: int | None = None) -> EvalReport:
    """Score full-frame (or centre-cropped) outputs on every valid window.

    Rows carry time ``j + t`` for pair (j, j+1) so t∈{0,1} rows are "deblur".
    """
    model.eval()
    rep = EvalReport()
    times = [0.0] + [k / factor for k in range(1, factor)] + [1.0]
    idx = 0
    with torch.no_grad():
        for seq in data:
            js = range(1, len(seq.blurry) - 2)
            if max_windows is not None:
                js = js[:max_windows]
            for j in js:
                s = sample_window(seq, j, factor)
                if crop is not None:
                    h, w = s.blurry[0].shape[:2]
                    s = sample_patch(s, crop, augment_=False, crop=((h - crop) // 2, (w - crop) // 2))
                inputs, targets = batch_tensors([s])
                preds = model(inputs)
                for t, p, g in zip(times, preds, targets):
                    role = "interp" if 0 < t < 1 else "deblur"
                    p_ = p[0].permute(1, 2, 0)
                    g_ = g[0].permute(1, 2, 0)
                    rep.add(FrameScore(idx, j + t, role, psnr(p_, g_), ssim(p_, g_)))
                    idx += 1
    return rep


def baselines(data: Sequence[SequenceData], factor: int, max_windows: int | None = None,
              crop: int | None = None) -> EvalReport:
    """Same rows as :func:`evaluate` for the trivial predictors.

    t∈{0,1}: the blurry input itself; intermediate t: (B_0 + B_1) / 2.
    """
    rep = EvalReport()
    times = [0.0] + [k / factor for k in range(1, factor)] + [1.0]
    idx = 0
    for seq in data:
        js = range(1, len(seq.blurry) - 2)
        if max_windows is not None:
            js = js[:max_windows]
        for j in js:
            s = sample_window(seq, j, factor)
            if crop is not None:
                h, w = s.blurry[0].shape[:2]
                s = sample_patch(s, crop, augment_=False, crop=((h - crop) // 2, (w - crop) // 2))
            b0, b1 = s.blurry[1], s.blurry[2]
            for t, g in zip(times, s.targets):
                pred = b0 if t == 0 else b1 if t == 1 else (b0 + b1) / 2
                role = "interp" if 0 < t < 1 else "deblur"
                rep.add(FrameScore(idx, j + t, role, psnr(pred, g), ssim(pred, g)))
                idx += 1
    return rep
