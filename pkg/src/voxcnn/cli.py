"""Command-line interface.

Subcommands: train, evaluate, predict, preprocess, augment-preview,
synth. Every failure exits nonzero after printing a single
``error: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .augment import AugmentConfig, apply_plan, sample_plan
from .config import parse_config_file
from .rng import Rng
from .synth import DEFAULT_SYNTH_DIMS, generate_synthetic_dataset
from .volume import (DEFAULT_TARGET_DIMS, DETECTION_LABELS, SEVERITY_LABELS,
                     load_sample, preprocess_tree, write_pgm)


def _parse_dims(raw: str):
    parts = raw.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"expected dims as DxHxW, got {raw!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"expected dims as DxHxW, got {raw!r}") from None
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {raw!r}")
    return dims


def _cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    result = trainer.train(cfg, args.data, args.out)
    log = result.runlog
    print(f"trained {len(log.records)} epochs; "
          f"best epoch {log.best_epoch} with validation macro F1 "
          f"{log.best_metric:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"run log:    {result.runlog_path}")
    if result.curves_path is not None:
        print(f"curves:     {result.curves_path}")
    return 0


def _cmd_evaluate(args) -> int:
    out_dir = args.out if args.out is not None else None
    rep = trainer.evaluate(args.checkpoint, args.data, args.split, out_dir)
    sys.stdout.write(rep.to_text())
    if out_dir is not None:
        print(f"# artifacts written under {out_dir}")
    return 0


def _cmd_predict(args) -> int:
    label, probs = trainer.predict(args.checkpoint, args.input)
    space = DETECTION_LABELS if len(probs) == 2 else SEVERITY_LABELS
    print(f"class = {label}")
    for name, p in zip(space, probs):
        print(f"p.{name} = {p:.6f}")
    return 0


def _cmd_preprocess(args) -> int:
    dims = _parse_dims(args.dims)
    index_paths = preprocess_tree(args.in_dir, args.out, dims)
    for p in index_paths:
        print(f"index: {p}")
    return 0


def _cmd_augment_preview(args) -> int:
    vol = load_sample(args.input)
    rng = Rng(args.seed)
    plan = sample_plan(rng.child("preview"), AugmentConfig(), vol.dims)
    out = apply_plan(vol.voxels, plan)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = vol.dims[0]
    picks = sorted({0, depth // 2, depth - 1})
    for z in picks:
        write_pgm(vol.voxels[z], out_dir / f"slice{z:03d}_before.pgm")
        write_pgm(out[z], out_dir / f"slice{z:03d}_after.pgm")
    print(f"applied ops (in order): {', '.join(plan.ops) if plan.ops else '(none)'}")
    print(f"wrote {2 * len(picks)} PGM slices to {out_dir}")
    return 0


def _cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    train_path, val_path = generate_synthetic_dataset(
        args.out, args.per_class, dims, args.seed, args.task)
    print(f"index: {train_path}")
    print(f"index: {val_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxcnn",
        description="3D CNN training engine for volumetric CT classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--data", required=True,
                   help="directory containing train.tsv and validation.tsv")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="directory containing <split>.tsv index files")
    p.add_argument("--split", required=True, choices=("train", "validation"))
    p.add_argument("--out", default=None,
                   help="optional directory for report text and confusion figure")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="classify one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="MIAV file or directory of slice images")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("preprocess",
                       help="resample raw slice stacks and cache them as MIAV")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="dataset root laid out as <split>/<class>/<scan>/")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default="x".join(str(d) for d in DEFAULT_TARGET_DIMS),
                   help="target D x H x W (default %(default)s)")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("augment-preview",
                       help="write before/after PGM slices for one augmentation draw")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_augment_preview)

    p = sub.add_parser("synth", help="generate a synthetic MIAV dataset")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dims", default="x".join(str(d) for d in DEFAULT_SYNTH_DIMS),
                   help="volume D x H x W (default %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("detection", "severity"), default="detection")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
