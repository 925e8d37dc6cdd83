"""Multi-arm, multi-seed training comparisons."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .data import TaskData
from .schedule import ANTI_CURRICULUM, CONSTANT, CURRICULUM, V_SHAPED, ScheduleSpec
from .train import ATTENTION_DROPOUT, COMBINATION, DROPHEAD, NONE, TrainConfig, train

logger = logging.getLogger(__name__)

COMPARE_ARMS = (
    "none",
    "attention_dropout",
    "drophead_constant",
    "drophead_scheduled",
    "drophead_curriculum",
    "drophead_anticurriculum",
    "combination",
)
_SCHEDULE_OF = {
    "drophead_constant": CONSTANT,
    "drophead_scheduled": V_SHAPED,
    "drophead_curriculum": CURRICULUM,
    "drophead_anticurriculum": ANTI_CURRICULUM,
    "combination": V_SHAPED,
}


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    """Resolve a named comparison arm against ``base``.

    DropHead arms take their rates from ``base.schedule`` when given
    (``p_start``/``p_end``) and otherwise use 0.2; the schedule spans the
    whole run with the V-shape pivot at the learning-rate warmup.
    """
    if arm not in COMPARE_ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {', '.join(COMPARE_ARMS)}")
    if arm == "none":
        return replace(base, arm=NONE, schedule=None)
    if arm == "attention_dropout":
        return replace(base, arm=ATTENTION_DROPOUT, schedule=None)
    p_start, p_end = (base.schedule.p_start, base.schedule.p_end) if base.schedule else (0.2, 0.2)
    sched = ScheduleSpec(_SCHEDULE_OF[arm], p_start, p_end, base.warmup_steps,
                         base.total_steps)
    return replace(base, arm=COMBINATION if arm == "combination" else DROPHEAD, schedule=sched)


@dataclass
class RunSummary:
    arm: str
    seed: int
    dev_acc: float
    dev_loss: float
    run_dir: str | None = None


@dataclass
class ArmSummary:
    arm: str
    runs: int
    median_dev_acc: float
    mean_dev_acc: float
    std_dev_acc: float
    min_dev_acc: float
    max_dev_acc: float


@dataclass
class ComparisonReport:
    runs: list[RunSummary]
    arms: list[ArmSummary]

    def arm(self, name: str) -> ArmSummary:
        for a in self.arms:
            if a.arm == name:
                return a
        raise KeyError(name)

    def runs_of(self, name: str) -> list[RunSummary]:
        return sorted((r for r in self.runs if r.arm == name), key=lambda r: r.seed)


def summarize(runs: list[RunSummary], arms: list[str]) -> ComparisonReport:
    """Per-arm statistics; the standard deviation is the sample (n - 1) one."""
    out = []
    for arm in arms:
        accs = [r.dev_acc for r in sorted(runs, key=lambda r: r.seed) if r.arm == arm]
        if not accs:
            continue
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        out.append(ArmSummary(arm, len(accs), statistics.median(accs), statistics.fmean(accs), std,
                              min(accs), max(accs)))
    return ComparisonReport(sorted(runs, key=lambda r: (arms.index(r.arm), r.seed)), out)


def run_dir_name(arm: str | None, seed: int) -> str:
    return f"seed-{seed}" if arm is None else f"{arm}-seed-{seed}"


def compare_arms(base: TrainConfig, data: TaskData, arms, seeds, out_dir=None, on_run=None) -> ComparisonReport:
    """Train every (arm, seed) pair and summarize final dev accuracy.

    ``on_run(arm, seed, cfg, run_dir)`` is called before each run, which the
    CLI uses to write the resolved config snapshot.
    """
    arms = list(arms)
    if not arms:
        raise ValueError("at least one arm is required")
    if len(set(arms)) != len(arms):
        raise ValueError("arms must be distinct")
    resolved = {arm: arm_config(base, arm) for arm in arms}
    runs = []
    for arm in arms:
        for seed in seeds:
            cfg = replace(resolved[arm], seed=seed)
            run_dir = Path(out_dir) / run_dir_name(arm, seed) if out_dir is not None else None
            if on_run is not None:
                on_run(arm, seed, cfg, run_dir)
            logger.info("training arm %s seed %d", arm, seed)
            res = train(cfg, data, run_dir)
            last = res.metrics[-1] if res.metrics else None
            runs.append(RunSummary(arm, seed, last.dev_acc if last else float("nan"),
                                   last.dev_loss if last else float("nan"),
                                   str(run_dir) if run_dir is not None else None))
    report = summarize(runs, arms)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: ComparisonReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(
        json.dumps({"arms": [asdict(a) for a in report.arms], "runs": [asdict(r) for r in report.runs]}, indent=2)
        + "\n"
    )
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "runs", "median_dev_acc", "mean_dev_acc", "std_dev_acc", "min_dev_acc", "max_dev_acc"])
        for a in report.arms:
            w.writerow([a.arm, a.runs, repr(a.median_dev_acc), repr(a.mean_dev_acc), repr(a.std_dev_acc),
                        repr(a.min_dev_acc), repr(a.max_dev_acc)])
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "dev_acc", "dev_loss"])
        for r in report.runs:
            w.writerow([r.arm, r.seed, repr(r.dev_acc), repr(r.dev_loss)])
