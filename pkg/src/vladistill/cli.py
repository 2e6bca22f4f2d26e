"""Command-line entry point: ``vladistill <command> [flags]``.

Settings resolve as flags > ``--config`` file > built-in defaults. Every
:class:`TrainConfig` field has a flag (``lambda_a`` -> ``--lambda-a``).
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

from . import pipeline as P
from . import scenario as sc
from .config import ConfigError, TrainConfig, field_types, load_config, parse_value

COMMANDS = ("gen", "pretrain", "train-teacher", "train-student", "eval", "analyze", "ablate", "full-run")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (override --config)")
    for name, typ in field_types().items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar=typ.upper(), default=None)


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    if config:
        p.add_argument("--config", type=Path, help="key = value config file")
        _add_config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vladistill", description="Desk-scale VLA distillation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate dataset shards")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--out", type=Path, required=True)
    _common(p, config=False)

    p = sub.add_parser("pretrain", help="masked-patch encoder pretraining")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("train-teacher", help="train the oracle teacher")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoder", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("train-student", help="train the distilled student")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoder", type=Path, required=True)
    p.add_argument("--teacher", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("eval", help="open-loop evaluation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("student", "teacher"), default="student")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--tag")
    p.add_argument("--cumulative", action="store_true", help="average per-step errors up to each horizon")
    p.add_argument("--out", type=Path, required=True, help="eval_report.csv path")
    _common(p, config=False)

    p = sub.add_parser("analyze", help="teacher loss-distribution analyses")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("ablate", help="cumulative component ablation table")
    p.add_argument("--data", type=Path, help="existing shards (generated from the config otherwise)")
    p.add_argument("--out", type=Path, default=Path("runs/ablate"))
    _common(p)

    p = sub.add_parser("full-run", help="gen, pretrain, teacher, student and eval in order")
    p.add_argument("--out", type=Path, default=Path("runs/full"))
    _common(p)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    types = field_types()
    overrides = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = parse_value(f.name, raw, types[f.name])
    return cfg.with_overrides(**overrides)


def _load_data(path: Path) -> sc.Dataset:
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path} holds no dataset manifest")
    return sc.load_dataset(path)


def run(args) -> None:
    cmd = args.command
    threads = max(1, args.threads)
    if cmd == "gen":
        cfg = TrainConfig(n_scenes=args.scenes, data_seed=args.seed)
        P.gen(args.out, args.scenes, args.seed, tuple(args.split), threads)
        P.write_manifest(args.out, "gen", cfg, outputs=[args.out])
        return
    if cmd == "eval":
        ds = _load_data(args.data)
        model = P.model_from_checkpoint(args.checkpoint)
        samples = getattr(ds, args.split)
        P.evaluate(model, samples, args.mode, args.tag or args.mode, args.out, threads, args.cumulative)
        P.write_manifest(args.out.parent, "eval", TrainConfig(), [args.data, args.checkpoint], [args.out])
        return
    cfg = resolve_config(args)
    if cmd == "full-run":
        P.full_run(cfg, args.out, threads)
        return
    if cmd == "ablate":
        data = args.data or args.out / "data"
        if args.data is None:
            P.gen(data, cfg.n_scenes, cfg.data_seed, threads=threads)
        ds = _load_data(data)
        res = P.pretrain(ds, cfg, args.out)
        teacher, _ = P.train_teacher(ds, cfg, res.encoder, args.out, threads)
        P.ablate(ds, cfg, res.encoder, teacher, args.out, threads)
        P.write_manifest(args.out, "ablate", cfg, [data], [args.out / "ablation.csv"])
        return
    ds = _load_data(args.data)
    if cmd == "pretrain":
        P.pretrain(ds, cfg, args.out)
        P.write_manifest(args.out, "pretrain", cfg, [args.data], [args.out / "encoder.ckpt"])
    elif cmd == "train-teacher":
        encoder = P.encoder_from_checkpoint(args.encoder)
        P.train_teacher(ds, cfg, encoder, args.out, threads)
        P.write_manifest(args.out, "train-teacher", cfg, [args.data, args.encoder], [args.out / "teacher.ckpt"])
    elif cmd == "train-student":
        encoder = P.encoder_from_checkpoint(args.encoder)
        teacher = P.model_from_checkpoint(args.teacher) if args.teacher else None
        inputs = [args.data, args.encoder] + ([args.teacher] if args.teacher else [])
        P.train_student(ds, cfg, encoder, teacher, args.out, threads)
        P.write_manifest(args.out, "train-student", cfg, inputs, [args.out / "student.ckpt"])
    elif cmd == "analyze":
        teacher = P.model_from_checkpoint(args.teacher)
        P.analyze(teacher, getattr(ds, args.split), cfg, args.out, threads)
        P.write_manifest(args.out, "analyze", cfg, [args.data, args.teacher], [args.out / "loss_dist.csv"])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        if getattr(args, "config", None) is not None and not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        try:
            resolve_config(args) if hasattr(args, "config") else None
        except ConfigError as e:
            raise UsageError(f"vladistill: config error: {e}") from None
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        run(args)
    except Exception as e:  # noqa: BLE001 - report any stage failure as exit 2
        print(f"vladistill {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        if "VLADISTILL_TRACEBACK" in os.environ:
            traceback.print_exc()
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
