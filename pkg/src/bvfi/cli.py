"""Command-line entry point: ``bvfi <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None


def _cmd_make_toy(args) -> int:
    from .data import BlurSpec, make_toy_dataset
    dirs = make_toy_dataset(args.out, args.sequences, args.size, args.seed,
                            blurry_per_sequence=args.blurry_frames, spec=BlurSpec(args.window, args.stride))
    print(f"wrote {len(dirs)} sequences to {args.out}")
    return EXIT_OK


def _cmd_synth_blur(args) -> int:
    from .data import BlurSpec, synth_blur_dir
    dirs = synth_blur_dir(args.inp, args.out, BlurSpec(args.window, args.stride), args.fps)
    print(f"blurred {len(dirs)} sequences into {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .data import load_dataset, read_manifest
    from .training import Checkpoint, build_model, parse_config, train

    entries = read_manifest(args.config)
    for key in ("iterations", "seed", "batch", "patch", "eval_every", "lr_max", "lr_min"):
        val = getattr(args, key)
        if val is not None:
            entries[key] = str(val)
    tcfg, mcfg = parse_config(entries)
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    model = build_model(mcfg, tcfg.seed)
    print(f"parameters: {model.num_parameters()}")
    resume = Checkpoint.load(args.resume) if args.resume else None
    res = train(model, data, tcfg, args.out, val_data=val, resume=resume)
    print(f"trained {len(res.losses)} steps in {res.seconds:.1f}s; final loss {res.losses[-1]:.6f}"
          if res.losses else "nothing to do")
    return EXIT_OK


def _cmd_interpolate(args) -> int:
    import torch

    from .data import read_frames, write_frames, write_manifest
    from .pipeline import FrameSequence, interpolate_video
    from .training import load_model

    model, _ = load_model(args.ckpt)
    frames = read_frames(args.inp)
    if len(frames) < 4:
        raise ValueError(f"need at least 4 input frames, found {len(frames)} in {args.inp}")
    seq = FrameSequence([torch.from_numpy(f).permute(2, 0, 1)[None] for f in frames], args.fps)
    out = interpolate_video(model, seq, args.factor, batch_windows=args.batch_windows)
    imgs = [im[0].permute(1, 2, 0).numpy() for im in out.images]
    write_frames(args.out, imgs)
    write_manifest(Path(args.out) / "manifest.txt",
                   {"fps": f"{out.fps:g}", "factor": args.factor, "source_frames": len(frames)})
    print(f"wrote {len(imgs)} frames to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import read_frames, read_manifest
    from .metrics import EvalReport

    preds, gts = read_frames(args.pred), read_frames(args.gt)
    if not preds:
        raise ValueError(f"no PNG frames in {args.pred}")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted frames vs {len(gts)} ground-truth frames")
    factor = args.factor
    man = Path(args.pred) / "manifest.txt"
    if factor is None and man.exists():
        factor = int(read_manifest(man).get("factor", 1))
    factor = factor or 1
    rep = EvalReport.from_frames(preds, gts, [i / factor for i in range(len(preds))])
    rep.write_csv(args.report)
    for group, agg in rep.aggregates().items():
        print(f"{group:>13}: PSNR {agg['psnr']:.4f} dB  SSIM {agg['ssim']:.4f}  ({agg['count']} frames)")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    reports = run_suite(args.seed, [args.module] if args.module else None)
    for r in reports:
        print(r)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    from .gradsuite import CASES

    p = _Parser(prog="bvfi", description="Blurry video frame interpolation tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("make-toy", help="render the moving-shapes toy dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--sequences", required=True, type=int)
    s.add_argument("--size", required=True, type=_size, help="frame size HxW (multiples of 8)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--blurry-frames", type=int, default=8, help="blurry frames per sequence")
    s.add_argument("--window", type=int, default=11)
    s.add_argument("--stride", type=int, default=8)
    s.set_defaults(fn=_cmd_make_toy)

    s = sub.add_parser("synth-blur", help="average high-fps sharp frames into blurry frames")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--window", type=int, default=11)
    s.add_argument("--stride", type=int, default=8)
    s.add_argument("--fps", type=float, default=240.0)
    s.set_defaults(fn=_cmd_synth_blur)

    s = sub.add_parser("train", help="train from a key=value config file")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--val", type=Path)
    s.add_argument("--resume", type=Path)
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--eval-every", dest="eval_every", type=int)
    s.add_argument("--lr-max", dest="lr_max", type=float)
    s.add_argument("--lr-min", dest="lr_min", type=float)
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("interpolate", help="deblur and raise the frame rate of a PNG directory")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--factor", required=True, type=int, choices=[2, 8])
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--fps", type=float, default=30.0, help="input frame rate (metadata only)")
    s.add_argument("--batch-windows", type=int, default=1)
    s.set_defaults(fn=_cmd_interpolate)

    s = sub.add_parser("eval", help="per-frame PSNR/SSIM report")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--report", required=True, type=Path)
    s.add_argument("--factor", type=int, help="frames per input interval (default: from pred manifest, else 1)")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=sorted(CASES))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
