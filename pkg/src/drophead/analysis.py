"""Post-training head analysis: single-head ablation, gradient-based head
importance, and importance-ordered pruning sweeps.

Metrics are "higher is better" (accuracy, or negated loss), so a negative
delta means removing a head hurt the model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, batches
from .model import ATTENTION_TYPES, ForwardOptions, TransformerModel
from .tensor import NonFiniteError, Tape, Tensor
from .train import batch_loss, check_compatible, evaluate

ACCURACY = "accuracy"
NEG_LOSS = "neg_loss"


def _model(model_or_path) -> TransformerModel:
    if isinstance(model_or_path, TransformerModel):
        return model_or_path
    from .checkpoint import load_checkpoint

    return load_checkpoint(model_or_path)


def measure(model: TransformerModel, dataset: Dataset, opts: ForwardOptions | None = None,
            metric: str = ACCURACY) -> float:
    res = evaluate(model, dataset, opts=opts)
    if metric == ACCURACY:
        return res.accuracy
    if metric == NEG_LOSS:
        return -res.loss
    raise ValueError(f"unknown metric {metric!r}")


def _keep_opts(keep: dict[int, np.ndarray], rescale: bool) -> ForwardOptions:
    return ForwardOptions(head_keep=keep, rescale_kept=rescale)


def mask_single_head_eval(model, dataset: Dataset, site: int, head: int, rescale: bool = True,
                          metric: str = ACCURACY) -> float:
    """Metric with one head's output forced to zero.

    The other heads of that sublayer are scaled by ``H / (H - 1)`` unless
    ``rescale`` is false.
    """
    model = _model(model)
    H = model.config.num_heads
    if not 0 <= site < len(model.sites):
        raise IndexError(f"site {site} out of range for {len(model.sites)} attention sublayers")
    if not 0 <= head < H:
        raise IndexError(f"head {head} out of range for {H} heads")
    if H == 1:
        raise ValueError("cannot remove the only head of a sublayer (it would drop every head)")
    keep = np.ones(H)
    keep[head] = 0
    return measure(model, dataset, _keep_opts({site: keep}, rescale), metric)


@dataclass
class TypeSummary:
    kind: str
    baseline: float
    worst_metric: float
    mean_dominant_delta: float
    dominant: list[tuple[int, int, float]]  # (site, head, delta) per layer


@dataclass
class AblationReport:
    metric: str
    baseline: float
    grid: dict[tuple[int, int], float]
    per_type: dict[str, TypeSummary] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "baseline": self.baseline,
            "grid": [{"site": s, "head": h, "delta": d} for (s, h), d in sorted(self.grid.items())],
            "per_type": {k: asdict(v) for k, v in self.per_type.items()},
        }


def dominant_head_report(model, dataset: Dataset, rescale: bool = True, metric: str = ACCURACY) -> AblationReport:
    """Ablate every head once; per attention type, average the worst per-layer delta."""
    model = _model(model)
    if model.config.num_heads == 1:
        raise ValueError("dominant-head analysis needs at least two heads per sublayer")
    baseline = measure(model, dataset, metric=metric)
    grid = {}
    for site in model.sites:
        for h in range(model.config.num_heads):
            grid[(site.index, h)] = mask_single_head_eval(model, dataset, site.index, h, rescale, metric) - baseline
    report = AblationReport(metric, baseline, grid)
    for kind in ATTENTION_TYPES:
        sites = model.sites_of(kind)
        if not sites:
            continue
        dominant = []
        for site in sites:
            # min() keeps the first (lowest head index) among ties.
            h = min(range(model.config.num_heads), key=lambda i: grid[(site.index, i)])
            dominant.append((site.index, h, grid[(site.index, h)]))
        deltas = [d for _, _, d in dominant]
        report.per_type[kind] = TypeSummary(kind, baseline, baseline + min(deltas), float(np.mean(deltas)), dominant)
    return report


@dataclass
class HeadImportance:
    stack: str
    layer: int
    kind: str
    head: int
    score: float
    site: int
    normalized: float | None = None


def head_importance_scores(model, dataset: Dataset, normalize: bool = False, batch_size: int = 100) -> list[HeadImportance]:
    """Mean over examples of |d loss / d gate| for a unit gate on each head's output."""
    model = _model(model)
    check_compatible(model, dataset)
    if len(dataset) == 0:
        raise ValueError("importance needs a non-empty dataset")
    H = model.config.num_heads
    totals = np.zeros((len(model.sites), H))
    dt = model.config.np_dtype
    for batch in batches(dataset, batch_size):
        gates = {s.index: Tensor(np.ones((len(batch), H), dtype=dt), requires_grad=True) for s in model.sites}
        with Tape() as tape:
            loss, _ = batch_loss(model, batch, ForwardOptions(gates=gates), per_example=True)
            tape.backward(loss)
        for s in model.sites:
            g = gates[s.index].grad
            if g is None:
                g = np.zeros((len(batch), H))
            if not np.isfinite(g).all():
                bad = int(np.flatnonzero(~np.isfinite(g).all(axis=0))[0])
                raise NonFiniteError(f"importance gradient is not finite at site {s.index} head {bad}")
            totals[s.index] += np.abs(g.astype(np.float64)).sum(axis=0)
    for p in model.params.values():
        p.grad = None
    scores = totals / len(dataset)
    out = []
    for s in model.sites:
        norm = float(np.linalg.norm(scores[s.index]))
        for h in range(H):
            nz = (float(scores[s.index, h]) / norm if norm > 0 else 0.0) if normalize else None
            out.append(HeadImportance(s.stack, s.layer, s.kind, h, float(scores[s.index, h]), s.index, nz))
    return out


@dataclass
class PrunePoint:
    fraction: float
    pruned: int
    metric: float
    keep: dict[int, list[int]]
    pinned: list[int] = field(default_factory=list)


def pruning_order(scores: list[HeadImportance], use_normalized: bool = False) -> list[tuple[int, int]]:
    """(site, head) pairs in ascending importance, ties by (site, head)."""
    key = (lambda r: (r.normalized, r.site, r.head)) if use_normalized else (lambda r: (r.score, r.site, r.head))
    return [(r.site, r.head) for r in sorted(scores, key=key)]


def pruning_sweep(model, dataset: Dataset, fractions, scores: list[HeadImportance] | None = None,
                  rescale: bool = True, metric: str = ACCURACY) -> list[PrunePoint]:
    """Remove the globally least important heads and re-evaluate.

    At fraction ``f`` the first ``floor(f * total_heads)`` heads in ascending
    importance are masked, except that a sublayer never loses its last head;
    such skips are listed in ``pinned``.
    """
    model = _model(model)
    fractions = list(fractions)
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be sorted ascending")
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1)")
    if scores is None:
        scores = head_importance_scores(model, dataset)
    order = pruning_order(scores)
    H = model.config.num_heads
    total = len(model.sites) * H
    curve = []
    for f in fractions:
        target = math.floor(f * total + 1e-9)
        keep = {s.index: np.ones(H) for s in model.sites}
        pruned, pinned = 0, []
        for site, head in order:
            if pruned == target:
                break
            if keep[site].sum() == 1:
                if site not in pinned:
                    pinned.append(site)
                continue
            keep[site][head] = 0
            pruned += 1
        active = {s: k for s, k in keep.items() if k.sum() < H}
        value = measure(model, dataset, _keep_opts(active, rescale) if active else None, metric)
        curve.append(PrunePoint(f, pruned, value, {s: k.astype(int).tolist() for s, k in keep.items()}, pinned))
    return curve


def write_ablation(report: AblationReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "head", "delta"])
        for (s, h), d in sorted(report.grid.items()):
            w.writerow([s, h, repr(d)])


def write_importance(scores: list[HeadImportance], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "importance.json").write_text(json.dumps([asdict(r) for r in scores], indent=2) + "\n")
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stack", "layer", "type", "head", "score", "normalized"])
        for r in scores:
            w.writerow([r.stack, r.layer, r.kind, r.head, repr(r.score), "" if r.normalized is None else repr(r.normalized)])


def write_pruning(curve: list[PrunePoint], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pruning.json").write_text(json.dumps([asdict(p) for p in curve], indent=2) + "\n")
    with open(out / "pruning.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "pruned", "metric", "pinned_sites"])
        for p in curve:
            w.writerow([p.fraction, p.pruned, repr(p.metric), " ".join(map(str, p.pinned))])
