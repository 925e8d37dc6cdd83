"""Deterministic training loop with Adam, warmup LR and scheduled DropHead."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import BEFORE_WO, PER_EXAMPLE, DropHeadConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PAD, Batch, Dataset, TaskData, batches
from .model import (
    CLASSIFIER,
    ForwardOptions,
    ModelConfig,
    TransformerModel,
    classifier_loss,
    greedy_decode,
    seq2seq_loss,
)
from .schedule import V_SHAPED, ScheduleSpec, drop_rate_at, learning_rate_at
from .tensor import NonFiniteError, Tape, Tensor

logger = logging.getLogger(__name__)

NONE = "none"
ATTENTION_DROPOUT = "attention_dropout"
DROPHEAD = "drophead"
COMBINATION = "combination"
ARMS = (NONE, ATTENTION_DROPOUT, DROPHEAD, COMBINATION)

METRICS_HEADER = ("step", "train_loss", "dev_loss", "dev_acc", "drop_rate", "lr", "wall_ms")
TIMING_NAME = "timing.csv"
CHECKPOINT_NAME = "checkpoint.dhck"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # None with a DropHead arm means the V-shaped default tied to the LR warmup.
    schedule: ScheduleSpec | None = None
    arm: str = NONE
    attn_dropout: float = 0.1
    base_lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    eval_interval: int = 200
    clip_norm: float | None = 1.0
    mask_granularity: str = PER_EXAMPLE
    rescale: str = BEFORE_WO
    # Off by default so metrics.csv is reproducible bitwise; timing.csv always has the times.
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if self.total_steps < 0 or self.warmup_steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("total_steps >= 0, warmup_steps >= 1, batch_size >= 1 and eval_interval >= 1 required")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError("attn_dropout must be in [0, 1)")
        if self.uses_drophead:
            if not self.model.placement.any():
                raise ValueError("a DropHead arm needs at least one placement flag set")
            sched = self.drop_schedule
            if sched.total_steps != self.total_steps:
                raise ValueError(
                    f"schedule.total_steps ({sched.total_steps}) must equal total_steps ({self.total_steps})"
                )
        # Probe the DropHead options early so bad values fail at config time.
        DropHeadConfig(0.0, granularity=self.mask_granularity, rescale=self.rescale)

    @property
    def uses_drophead(self) -> bool:
        return self.arm in (DROPHEAD, COMBINATION)

    @property
    def uses_attention_dropout(self) -> bool:
        return self.arm in (ATTENTION_DROPOUT, COMBINATION)

    @property
    def drop_schedule(self) -> ScheduleSpec:
        if self.schedule is not None:
            return self.schedule
        return ScheduleSpec(V_SHAPED, 0.2, 0.2, self.warmup_steps, self.total_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def zeros(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of parameter {name!r} is not finite")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    dev_loss: float
    dev_acc: float
    drop_rate: float
    lr: float
    wall_ms: int = 0

    def row(self) -> list[str]:
        return [str(self.step), repr(self.train_loss), repr(self.dev_loss), repr(self.dev_acc),
                repr(self.drop_rate), repr(self.lr), str(self.wall_ms)]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    exact_match: float | None = None
    count: int = 0


def batch_loss(model, batch: Batch, opts: ForwardOptions | None = None, per_example: bool = False):
    if model.config.architecture == CLASSIFIER:
        return classifier_loss(model, batch.src, batch.labels, opts, per_example)
    return seq2seq_loss(model, batch.src, batch.tgt, opts, per_example)


def check_compatible(model: TransformerModel, dataset: Dataset) -> None:
    cfg = model.config
    if dataset.vocab_size != cfg.vocab_size:
        raise ValueError(f"dataset vocab {dataset.vocab_size} != model vocab {cfg.vocab_size}")
    if dataset.is_classification != (cfg.architecture == CLASSIFIER):
        raise ValueError(f"{dataset.kind} data does not fit a {cfg.architecture} model")
    if dataset.is_classification and (dataset.num_classes or 0) > cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model has {cfg.num_classes}")


def evaluate(model, dataset: Dataset, batch_size: int = 250, exact_match: bool = False,
             opts: ForwardOptions | None = None) -> EvalResult:
    """Loss and accuracy over the whole dataset in inference mode.

    ``model`` may be a checkpoint path. For seq2seq models accuracy is
    teacher-forced next-token accuracy; ``exact_match`` additionally runs
    greedy decoding and reports the fraction of exactly reproduced targets.
    """
    if not isinstance(model, TransformerModel):
        model = load_checkpoint(model)
    check_compatible(model, dataset)
    opts = opts or ForwardOptions()
    if opts.training:
        raise ValueError("evaluate() runs in inference mode")
    loss_sum = 0.0
    hits = 0
    count = 0
    exact = 0
    for batch in batches(dataset, batch_size):
        loss, logits = batch_loss(model, batch, opts)
        pred = logits.data.argmax(axis=-1)
        if model.config.architecture == CLASSIFIER:
            n = len(batch)
            hits += int((pred == batch.labels).sum())
        else:
            targets = batch.tgt[:, 1:]
            valid = targets != PAD
            n = int(valid.sum())
            hits += int(((pred == targets) & valid).sum())
            if exact_match:
                decoded = greedy_decode(model, batch.src, batch.tgt.shape[1])
                for out, tgt in zip(decoded, batch.tgt):
                    body = [int(t) for t in tgt[1:] if t != PAD][:-1]
                    exact += out == body
        loss_sum += float(loss.data) * n
        count += n
    return EvalResult(loss_sum / count, hits / count, exact / len(dataset) if exact_match else None, count)


@dataclass
class TrainResult:
    model: TransformerModel
    metrics: list[MetricsRecord]
    rates: list[float]
    run_dir: Path | None = None
    wall_ms: list[int] = field(default_factory=list)


def _infinite_batches(dataset: Dataset, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from batches(dataset, batch_size, shuffle_seed=(seed, epoch))
        epoch += 1


def train(cfg: TrainConfig, data: TaskData, out_dir=None) -> TrainResult:
    """Train from scratch; the step-``t`` DropHead rate is ``drop_rate_at(schedule, t)``.

    With ``out_dir`` the checkpoint and ``metrics.csv`` are (re)written at
    every evaluation and at the end. Wall-clock times always go to
    ``timing.csv``; the ``wall_ms`` metrics column is 0 unless
    ``record_wall_clock`` is set, so by default the metrics file is
    reproducible bitwise.
    """
    if len(data.train) == 0:
        raise ValueError("training split is empty")
    model = TransformerModel.init(cfg.model, seed=cfg.seed)
    check_compatible(model, data.train)
    state = AdamState.zeros(model.params)
    sched = cfg.drop_schedule if cfg.uses_drophead else None
    run_dir = Path(out_dir) if out_dir is not None else None
    metrics: list[MetricsRecord] = []
    rates: list[float] = []
    walls: list[int] = []
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / METRICS_NAME, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        with open(run_dir / TIMING_NAME, "w", newline="") as fh:
            csv.writer(fh).writerow(("step", "wall_ms"))
        save_checkpoint(model, run_dir / CHECKPOINT_NAME)

    stream = _infinite_batches(data.train, cfg.batch_size, cfg.seed)
    start = time.perf_counter()
    window_loss, window_n = 0.0, 0
    for step in range(cfg.total_steps):
        rate = drop_rate_at(sched, step) if sched is not None else 0.0
        rates.append(rate)
        lr = learning_rate_at(cfg.base_lr, cfg.warmup_steps, step + 1)
        opts = ForwardOptions(
            training=True,
            seed=cfg.seed,
            step=step,
            drophead=DropHeadConfig(rate, granularity=cfg.mask_granularity, rescale=cfg.rescale)
            if sched is not None else None,
            attn_dropout=cfg.attn_dropout if cfg.uses_attention_dropout else 0.0,
        )
        batch = next(stream)
        try:
            with Tape() as tape:
                loss, _ = batch_loss(model, batch, opts)
                tape.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            if cfg.clip_norm is not None:
                clip_grad_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, lr)
        except NonFiniteError as exc:
            logger.error("step %d: %s", step, exc)
            raise TrainingDiverged(step, str(exc)) from exc
        finally:
            for p in model.params.values():
                p.grad = None
        window_loss += float(loss.data)
        window_n += 1

        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            dev = evaluate(model, data.dev)
            wall = int((time.perf_counter() - start) * 1000)
            rec = MetricsRecord(step + 1, window_loss / window_n, dev.loss, dev.accuracy, rate, lr,
                                wall if cfg.record_wall_clock else 0)
            metrics.append(rec)
            walls.append(wall)
            window_loss, window_n = 0.0, 0
            logger.info("step %d train_loss %.4f dev_loss %.4f dev_acc %.4f rate %.3f lr %.2e",
                        rec.step, rec.train_loss, rec.dev_loss, rec.dev_acc, rate, lr)
            if run_dir is not None:
                with open(run_dir / METRICS_NAME, "a", newline="") as fh:
                    csv.writer(fh).writerow(rec.row())
                with open(run_dir / TIMING_NAME, "a", newline="") as fh:
                    csv.writer(fh).writerow((rec.step, wall))
                save_checkpoint(model, run_dir / CHECKPOINT_NAME)
    return TrainResult(model, metrics, rates, run_dir, walls)


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            MetricsRecord(int(r["step"]), float(r["train_loss"]), float(r["dev_loss"]), float(r["dev_acc"]),
                          float(r["drop_rate"]), float(r["lr"]), int(r["wall_ms"]))
            for r in reader
        ]
