"""Command-line surface: dataset generation and splitting, teacher and
student training, evaluation, probing, ablation grids, and the
augmentation-vs-auxiliary-label comparison.

Every training-family subcommand reads an optional config file and accepts
one override flag per config key (`--batch-size 16` overrides
`batch_size`). Exit codes: 0 success, 1 runtime failure (one-line
diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import tensor as T
from .config import KNOWN_KEYS, RunConfig, config_from_pairs, load_config
from .data import (few_shot_split, read_dataset, synth_generate,
                   train_test_partition, write_dataset)
from .errors import ConfigError, ContractError
from .evaluate import FlagSet, compare_da_sal, evaluate_top1, linear_probe, run_ablation
from .training import load_checkpoint, save_checkpoint, train_student, train_teacher


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="config file of key = value lines")
    for key in sorted(KNOWN_KEYS):
        sub.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                         metavar="V", default=None, help=f"override config key {key}")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base = load_config(args.config) if args.config else RunConfig()
    overrides = {key: getattr(args, f"cfg_{key}")
                 for key in KNOWN_KEYS if getattr(args, f"cfg_{key}") is not None}
    cfg = config_from_pairs(overrides, base=base) if overrides else base
    T.set_strict_mode(cfg.strict)
    return cfg


def _require_path(value: str, key: str) -> str:
    if not value:
        raise ConfigError(f"{key} must be set (config file or --{key.replace('_', '-')})")
    return value


def _ensure_parent(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ContractError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise ContractError("at least one seed is required")
    return seeds


def parse_grid(text: str) -> list[FlagSet]:
    """Cells split on ';', flags on '+', optional '@stages' suffix:
    "task;task+kl_q;task+kl_q@2,3" is three cells."""
    cells = []
    for cell in text.split(";"):
        cell = cell.strip()
        if not cell:
            continue
        flag_part, _, stage_part = cell.partition("@")
        flags = tuple(f.strip() for f in flag_part.split("+") if f.strip())
        try:
            stages = tuple(int(s) for s in stage_part.split(",")) if stage_part else ()
        except ValueError:
            raise ContractError(f"stage restriction must be integers, got {stage_part!r}")
        cells.append(FlagSet(flags, kl_q_stages=stages))
    if not cells:
        raise ContractError("grid has no cells")
    return cells


def _write_report(path_or_none: Optional[str], text: str) -> None:
    if path_or_none:
        _ensure_parent(path_or_none).write_text(text)


# Subcommand handlers --------------------------------------------------------


def _cmd_gen_data(args) -> int:
    if (args.test_per_class > 0) != (args.test_out is not None):
        raise ContractError("--test-per-class and --test-out go together")
    total = args.per_class + args.test_per_class
    ds = synth_generate(args.classes, total, args.side,
                        noise_std=args.noise_std, seed=args.seed,
                        channels=args.channels)
    if args.test_per_class:
        # One template pool, disjoint noise draws per half.
        ds, test = train_test_partition(ds, args.per_class)
        write_dataset(test, _ensure_parent(args.test_out))
        print(f"wrote {args.test_out}: {len(test.labels)} samples")
    write_dataset(ds, _ensure_parent(args.out))
    print(f"wrote {args.out}: {len(ds.labels)} samples, "
          f"{args.classes} classes, {args.channels}x{args.side}x{args.side}")
    return 0


def _cmd_split(args) -> int:
    ds = read_dataset(args.data)
    sub = few_shot_split(ds, args.fraction, args.seed)
    write_dataset(sub, _ensure_parent(args.out))
    print(f"wrote {args.out}: {len(sub.labels)} of {len(ds.labels)} samples")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _resolve_config(args)
    data = read_dataset(_require_path(cfg.train_path, "train_path"))
    ckpt = train_teacher(cfg, data)
    out = args.out or str(Path(cfg.out_dir or ".") / "teacher.ck")
    save_checkpoint(ckpt, _ensure_parent(out))
    print(f"wrote {out}: epoch {ckpt.epoch}")
    if cfg.test_path:
        report = evaluate_top1(ckpt, read_dataset(cfg.test_path))
        print(f"top1 = {report.top1:.4f}")
    return 0


def _cmd_train_student(args) -> int:
    cfg = _resolve_config(args)
    teacher = load_checkpoint(args.teacher)
    data = read_dataset(_require_path(cfg.train_path, "train_path"))
    ckpt = train_student(cfg, teacher, data)
    out = args.out or str(Path(cfg.out_dir or ".") / "student.ck")
    save_checkpoint(ckpt, _ensure_parent(out))
    print(f"wrote {out}: epoch {ckpt.epoch}")
    if cfg.test_path:
        report = evaluate_top1(ckpt, read_dataset(cfg.test_path))
        print(f"top1 = {report.top1:.4f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    T.set_strict_mode(ckpt.config.strict)
    report = evaluate_top1(ckpt, read_dataset(args.data))
    print(f"top1 = {report.top1:.4f}")
    _write_report(args.report, report.to_text())
    return 0


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    T.set_strict_mode(ckpt.config.strict)
    target = read_dataset(args.data)
    eval_data = read_dataset(args.eval_data) if args.eval_data else None
    report = linear_probe(ckpt, target, args.epochs, eval_data=eval_data)
    print(f"top1 = {report.top1:.4f}")
    _write_report(args.report, report.to_text())
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    teacher = load_checkpoint(args.teacher)
    train = read_dataset(_require_path(cfg.train_path, "train_path"))
    test = read_dataset(_require_path(cfg.test_path, "test_path"))
    grid = parse_grid(args.grid)
    seeds = parse_seeds(args.seeds)
    result = run_ablation(cfg, grid, seeds, teacher, train, test)
    text = result.to_text()
    print(text, end="")
    _write_report(args.report, text)
    return 0


def _cmd_compare_da_sal(args) -> int:
    cfg = _resolve_config(args)
    train = read_dataset(_require_path(cfg.train_path, "train_path"))
    test = read_dataset(_require_path(cfg.test_path, "test_path"))
    report = compare_da_sal(cfg, train, test, parse_seeds(args.seeds))
    text = report.to_text()
    print(text, end="")
    _write_report(args.report, text)
    return 0


# Parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagekd",
        description="Stage-paired distillation with rotation-augmented joint labels.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic template corpus")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=0.12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--test-per-class", type=int, default=0,
                   help="also carve a held-out set of this size per class")
    p.add_argument("--test-out", default=None, help="path for the held-out set")
    p.set_defaults(func=_cmd_gen_data)

    p = subs.add_parser("split", help="take a per-class few-shot subset")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = subs.add_parser("train-teacher", help="train a teacher per the config")
    _add_config_flags(p)
    p.add_argument("--out", default=None, help="checkpoint path (default: out_dir/teacher.ck)")
    p.set_defaults(func=_cmd_train_teacher)

    p = subs.add_parser("train-student", help="distill a teacher into a student")
    _add_config_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--out", default=None, help="checkpoint path (default: out_dir/student.ck)")
    p.set_defaults(func=_cmd_train_student)

    p = subs.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None, help="write the full report here")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("probe", help="linear probe on frozen pooled features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="probe training dataset")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--eval-data", default=None, help="held-out dataset (default: --data)")
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_probe)

    p = subs.add_parser("ablate", help="train one student per loss flag set")
    _add_config_flags(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--grid", required=True,
                   help="cells like 'task;task+kl_q;task+kl_q@2'")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = subs.add_parser("compare-da-sal",
                        help="baseline vs rotation-as-augmentation vs joint labels")
    _add_config_flags(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_compare_da_sal)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
