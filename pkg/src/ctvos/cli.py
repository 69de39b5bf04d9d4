"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# first eight maximally distinct hues
OVERLAY_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
], dtype=np.float64) / 255.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_overlay(frame: np.ndarray, masks, out_path, alpha: float = 0.5) -> Path:
    """Blend each object's mask over ``frame`` (values in [0,1]) in its palette color."""
    frame = np.asarray(frame, dtype=np.float64)
    m = np.asarray(getattr(masks, "masks", masks), dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.size and m.shape[1:] != frame.shape[:2]:
        raise ValueError(f"masks {m.shape[1:]} do not match frame {frame.shape[:2]}")
    out = frame.copy()
    for k in range(m.shape[0]):
        color = OVERLAY_PALETTE[k % len(OVERLAY_PALETTE)]
        out[m[k]] = (1 - alpha) * out[m[k]] + alpha * color
    path = Path(out_path)
    Image.fromarray(np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)).save(path)
    return path


# -- argument parsing --------------------------------------------------------------

def _config_flags(parser: argparse.ArgumentParser) -> None:
    from .train import TrainConfig

    group = parser.add_argument_group("training config (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _slice_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--start", type=int, default=0, help="index of the first sequence to use")
    parser.add_argument("--count", type=int, default=None, help="number of sequences (default: all)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctvos", description="Cutout/tagging self-supervised video object segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--data", required=True, help="corpus root (JPEGImages/ layout)")
    t.add_argument("--out", required=True, help="directory for checkpoint and logs")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None)
    _slice_flags(t)
    _config_flags(t)

    pr = sub.add_parser("propagate", help="propagate a first-frame mask through a frame directory")
    pr.add_argument("--ckpt", required=True, help="checkpoint, or 'stub' for the coordinate stub")
    pr.add_argument("--frames", required=True)
    pr.add_argument("--first-mask", required=True, help="indexed PNG for frame 0")
    pr.add_argument("--out", required=True, help="directory for per-frame indexed PNG masks")
    pr.add_argument("--window", type=int, default=7)
    pr.add_argument("--no-anchor", action="store_true", help="let the first frame leave the window")
    pr.add_argument("--scale", type=int, default=1, help="enlarge frames by this factor before propagating")
    pr.add_argument("--overlays", help="also write overlay images here")

    e = sub.add_parser("eval", help="propagate and score sequences with ground truth")
    e.add_argument("--ckpt", required=True, help="checkpoint, or 'stub' for the coordinate stub")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="TSV report path")
    e.add_argument("--window", type=int, default=7)
    e.add_argument("--no-anchor", action="store_true")
    e.add_argument("--scale", type=int, default=1, help="enlarge frames by this factor before propagating")
    _slice_flags(e)

    g = sub.add_parser("gradcheck", help="finite-difference check of all primitives and the full loss")
    g.add_argument("--skip-pipeline", action="store_true")

    v = sub.add_parser("visualize", help="overlay indexed masks on frames")
    v.add_argument("--frames", required=True)
    v.add_argument("--masks", required=True)
    v.add_argument("--out", required=True)
    return p


# -- commands ----------------------------------------------------------------------

def _sequence_ids(root: Path, start: int, count: int | None) -> list[str]:
    from .videogen import ClipError

    jpeg = root / "JPEGImages"
    if not jpeg.is_dir():
        raise ClipError(f"{root} has no JPEGImages directory")
    ids = sorted(d.name for d in jpeg.iterdir() if d.is_dir())
    ids = ids[start:] if count is None else ids[start:start + count]
    if not ids:
        raise ClipError(f"no sequences selected under {jpeg}")
    return ids


def _load_model(spec: str):
    from .model import CoordinateStubModel, load_model

    return CoordinateStubModel() if spec == "stub" else load_model(spec)


def cmd_synth(args) -> int:
    from .videogen import make_entries, synthesize_corpus

    entries = make_entries(args.sequences, args.seed, args.frames, args.width, args.height)
    manifest = synthesize_corpus(args.out, entries)
    print(f"wrote {len(entries)} sequences; manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import load_config, run_training
    from .videogen import load_sequence

    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    config = load_config(args.config, overrides)
    root = Path(args.data)
    clips = [load_sequence(root, s) for s in _sequence_ids(root, args.start, args.count)]
    res = run_training(clips, config, args.out, resume=args.resume, max_steps=args.max_steps)
    last = res.reports[-1].overall if res.reports else float("nan")
    print(f"{res.steps} steps; final loss {last:.6f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_propagate(args) -> int:
    from .infer import ObjectMaskSet, propagate_sequence
    from .videogen import load_frame_directory, read_index_png, write_index_png

    clip = load_frame_directory(args.frames)
    first = ObjectMaskSet.from_index(read_index_png(args.first_mask))
    preds = propagate_sequence(clip.frames, first, _load_model(args.ckpt), args.window,
                               not args.no_anchor, args.scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in Path(args.frames).iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if args.overlays:
        Path(args.overlays).mkdir(parents=True, exist_ok=True)
    for name, frame, pred in zip(names, clip.frames, preds):
        stem = Path(name).stem
        write_index_png(out / f"{stem}.png", pred.to_index())
        if args.overlays:
            write_overlay(frame, pred, Path(args.overlays) / f"{stem}.png")
    print(f"wrote {len(preds)} masks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .infer import evaluate_model
    from .videogen import load_sequence

    root = Path(args.data)
    clips = [load_sequence(root, s) for s in _sequence_ids(root, args.start, args.count)]
    missing = [c.id for c in clips if c.gt_masks is None or c.gt_masks.shape[0] == 0]
    if missing:
        raise ValueError(f"sequences without annotations: {', '.join(missing)}")
    report = evaluate_model(_load_model(args.ckpt), clips, args.window, not args.no_anchor, args.scale)
    Path(args.report).write_text(report.to_tsv())
    print(f"J {report.j_mean:.4f}  F {report.f_mean:.4f}  G {report.g:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(include_pipeline=not args.skip_pipeline)
    for r in results:
        print(r)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_visualize(args) -> int:
    from .infer import ObjectMaskSet
    from .videogen import ClipError, load_frame_directory, read_index_png

    clip = load_frame_directory(args.frames)
    mask_files = sorted(p for p in Path(args.masks).iterdir() if p.suffix.lower() == ".png")
    if len(mask_files) != clip.num_frames:
        raise ClipError(f"{clip.num_frames} frames but {len(mask_files)} masks")
    indices = [read_index_png(p) for p in mask_files]
    ids = sorted({int(i) for idx in indices for i in np.unique(idx) if i != 0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, frame, idx in zip(mask_files, clip.frames, indices):
        write_overlay(frame, ObjectMaskSet.from_index(idx, ids) if ids else np.zeros((0,) + idx.shape, bool),
                      out / path.name)
    print(f"wrote {len(mask_files)} overlays to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "propagate": cmd_propagate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    from .train import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"ctvos {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"ctvos {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())
