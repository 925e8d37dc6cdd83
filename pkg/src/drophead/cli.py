"""Command-line driver: ``drophead {train,compare,evaluate,analyze,schedule-dump}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Set ``DROPHEAD_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import SPLITS
from .experiments import COMPARE_ARMS, compare_arms, run_dir_name
from .schedule import KINDS, ScheduleSpec, drop_rate_at
from .train import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
logger = logging.getLogger("drophead")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fractions(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drophead", description="DropHead training and head-analysis experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("--config", required=True, help="experiment JSON")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--seed", type=int, action="append", help="seed; repeat for replicates (overrides seeds)")

    c = sub.add_parser("compare", help="train several arms across seeds and summarize")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.add_argument("--seed", type=int, action="append")
    c.add_argument("--arm", action="append", default=[], help=f"one of {', '.join(COMPARE_ARMS)}; repeatable")

    e = sub.add_parser("evaluate", help="loss and accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="experiment JSON describing the dataset")
    e.add_argument("--split", choices=SPLITS, default="dev")
    e.add_argument("--exact-match", action="store_true", help="also report greedy-decode exact match")
    e.add_argument("--out", help="write the JSON result here instead of stdout")

    a = sub.add_parser("analyze", help="head ablation, importance or pruning analysis")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True, choices=("dominant", "importance", "prune"))
    a.add_argument("--fractions", type=_fractions, help="comma-separated pruning fractions (prune only)")
    a.add_argument("--split", choices=SPLITS, default="dev")
    a.add_argument("--metric", choices=(analysis.ACCURACY, analysis.NEG_LOSS), default=analysis.ACCURACY)
    a.add_argument("--no-rescale", action="store_true", help="do not rescale surviving heads")
    a.add_argument("--normalize", action="store_true", help="add per-sublayer L2-normalized importance")
    a.add_argument("--out", required=True)

    s = sub.add_parser("schedule-dump", help="CSV of (step, rate) for a DropHead schedule")
    s.add_argument("--kind", choices=KINDS, default="v_shaped")
    s.add_argument("--p-start", type=float, default=0.2)
    s.add_argument("--p-end", type=float, default=0.2)
    s.add_argument("--warmup", type=int, default=4000)
    s.add_argument("--total", type=int, default=100000)
    s.add_argument("--every", type=int, default=1, help="row stride (breakpoints are always included)")
    s.add_argument("--out", help="CSV path (default stdout)")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None):
        try:
            cfg = replace(cfg, seeds=list(args.seed))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if getattr(args, "out", None) and args.command in ("train", "compare"):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _snapshot(cfg: ExperimentConfig, seed: int, run_cfg, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = replace(cfg, train=run_cfg, seeds=[seed], out_dir=str(run_dir.parent))
    (run_dir / "config.json").write_text(dump_config(resolved))


def cmd_train(args) -> int:
    cfg = _load(args)
    data = cfg.data.generate()
    for seed in cfg.seeds:
        run_cfg = replace(cfg.train, seed=seed)
        run_dir = Path(cfg.out_dir) / run_dir_name(None, seed)
        _snapshot(cfg, seed, run_cfg, run_dir)
        res = train(run_cfg, data, run_dir)
        last = res.metrics[-1] if res.metrics else None
        print(f"{run_dir}\tdev_acc={last.dev_acc if last else float('nan'):.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.arm:
        raise UsageError("compare needs at least one --arm")
    bad = [a for a in args.arm if a not in COMPARE_ARMS]
    if bad:
        raise UsageError(f"unknown arm {bad[0]!r}; expected one of {', '.join(COMPARE_ARMS)}")
    cfg = _load(args)
    data = cfg.data.generate()
    report = compare_arms(cfg.train, data, args.arm, cfg.seeds, cfg.out_dir,
                          on_run=lambda arm, seed, run_cfg, run_dir: _snapshot(cfg, seed, run_cfg, run_dir))
    for a in report.arms:
        print(f"{a.arm}\tmedian_dev_acc={a.median_dev_acc:.4f}\tstd={a.std_dev_acc:.4f}\truns={a.runs}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    dataset = cfg.data.generate()[args.split]
    res = evaluate(args.checkpoint, dataset, exact_match=args.exact_match)
    text = json.dumps(asdict(res), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.fractions is not None and args.mode != "prune":
        raise UsageError("--fractions is only valid with --mode prune")
    if args.mode == "prune" and not args.fractions:
        raise UsageError("--mode prune needs --fractions")
    cfg = _load(args)
    dataset = cfg.data.generate()[args.split]
    model = load_checkpoint(args.checkpoint)
    rescale = not args.no_rescale
    if args.mode == "dominant":
        if model.config.num_heads == 1:
            raise UsageError("dominant-head analysis needs at least two heads per sublayer; "
                             "removing the only head would drop every head")
        analysis.write_ablation(analysis.dominant_head_report(model, dataset, rescale, args.metric), args.out)
    elif args.mode == "importance":
        analysis.write_importance(analysis.head_importance_scores(model, dataset, args.normalize), args.out)
    else:
        try:
            curve = analysis.pruning_sweep(model, dataset, args.fractions, rescale=rescale, metric=args.metric)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        analysis.write_pruning(curve, args.out)
    print(args.out)
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    if args.every < 1:
        raise UsageError("--every must be at least 1")
    try:
        spec = ScheduleSpec(args.kind, args.p_start, args.p_end, args.warmup, args.total)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    steps = sorted(set(range(0, spec.total_steps + 1, args.every)) | {0, spec.warmup_steps, spec.total_steps})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "rate"])
        for step in steps:
            w.writerow([step, repr(drop_rate_at(spec, step))])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "schedule-dump": cmd_schedule_dump,
}


def _setup_logging() -> None:
    level = os.environ.get("DROPHEAD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"drophead {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"drophead {args.command}: {exc} (partial artifacts kept)", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, OSError, ValueError, ArithmeticError) as exc:
        print(f"drophead {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
