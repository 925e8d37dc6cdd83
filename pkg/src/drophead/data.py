"""Synthetic desk-scale tasks: copy / reverse / sort transduction and
keyword classification, plus padded batching.

Token ids 0, 1, 2 are reserved for padding, begin- and end-of-sequence;
content tokens are ``3 .. vocab_size - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PAD, BOS, EOS = 0, 1, 2
FIRST_TOKEN = 3
SPLITS = ("train", "dev", "test")
TRANSDUCTION_KINDS = ("copy", "reverse", "sort")
CLASSIFY = "keyword_classify"
_MAX_ATTEMPTS_FACTOR = 50


@dataclass(frozen=True)
class Example:
    src: tuple[int, ...]
    tgt: tuple[int, ...] | None = None
    label: int | None = None


@dataclass
class Dataset:
    kind: str
    vocab_size: int
    len_range: tuple[int, int]
    examples: list[Example]
    split: str = "train"
    seed: int = 0
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def is_classification(self) -> bool:
        return self.kind == CLASSIFY


@dataclass
class TaskData:
    train: Dataset
    dev: Dataset
    test: Dataset

    def __getitem__(self, split: str) -> Dataset:
        return getattr(self, split)


def transduce(kind: str, src) -> tuple[int, ...]:
    """Target sequence for ``src`` under ``kind``, framed by BOS/EOS."""
    if kind == "copy":
        body = list(src)
    elif kind == "reverse":
        body = list(src)[::-1]
    elif kind == "sort":
        body = sorted(src)
    else:
        raise ValueError(f"unknown transduction kind {kind!r}")
    return (BOS, *body, EOS)


def _check_common(vocab_size: int, len_range, sizes) -> None:
    if vocab_size < 4:
        raise ValueError("vocab_size must be at least 4 (three ids are reserved)")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {len_range}")
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError("need a positive example count for each of train/dev/test")


def _fill_split(draw, n: int, rng, taken: set) -> list[Example]:
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > _MAX_ATTEMPTS_FACTOR * n + 1000:
            raise ValueError("cannot draw enough examples disjoint from earlier splits; enlarge vocab or lengths")
        ex = draw(rng, len(out))
        if ex.src in taken:
            continue
        out.append(ex)
    return out


def gen_transduction(
    kind: str,
    seed: int,
    vocab_size: int = 32,
    len_range: tuple[int, int] = (5, 16),
    sizes: tuple[int, int, int] = (10000, 1000, 1000),
) -> TaskData:
    """Random source sequences with their ``kind`` transform as target.

    Each split draws from its own seed sub-stream; sources already used by an
    earlier split are redrawn so the splits are disjoint.
    """
    if kind not in TRANSDUCTION_KINDS:
        raise ValueError(f"unknown transduction kind {kind!r}")
    _check_common(vocab_size, len_range, sizes)
    lo, hi = len_range

    def draw(rng, _i):
        n = int(rng.integers(lo, hi + 1))
        src = tuple(int(t) for t in rng.integers(FIRST_TOKEN, vocab_size, size=n))
        return Example(src, transduce(kind, src))

    splits = {}
    taken: set = set()
    for k, (name, n) in enumerate(zip(SPLITS, sizes)):
        rng = np.random.default_rng((seed, k))
        exs = _fill_split(draw, n, rng, taken)
        taken.update(e.src for e in exs)
        splits[name] = Dataset(kind, vocab_size, (lo, hi), exs, name, seed)
    return TaskData(**splits)


def gen_classification(
    seed: int,
    vocab_size: int = 32,
    len_range: tuple[int, int] = (5, 16),
    sizes: tuple[int, int, int] = (10000, 1000, 1000),
    num_classes: int = 4,
    num_keywords: int | None = None,
) -> TaskData:
    """Sequences of distractor tokens with one planted keyword; the label is
    the keyword's index.

    Keywords are tokens ``FIRST_TOKEN .. FIRST_TOKEN + num_keywords - 1``;
    distractors are drawn uniformly from the remaining content tokens.
    Labels are balanced: ``i % num_classes`` over a shuffled order.
    """
    num_keywords = num_classes if num_keywords is None else num_keywords
    _check_common(vocab_size, len_range, sizes)
    if not 2 <= num_classes <= num_keywords:
        raise ValueError(f"num_classes={num_classes} must be in [2, num_keywords={num_keywords}]")
    first_distractor = FIRST_TOKEN + num_keywords
    if first_distractor >= vocab_size:
        raise ValueError("no distractor tokens left after reserving keywords")
    lo, hi = len_range

    def draw_for(labels):
        def draw(rng, i):
            label = int(labels[i])
            n = int(rng.integers(lo, hi + 1))
            toks = rng.integers(first_distractor, vocab_size, size=n)
            toks[int(rng.integers(0, n))] = FIRST_TOKEN + label
            return Example(tuple(int(t) for t in toks), label=label)

        return draw

    splits = {}
    taken: set = set()
    for k, (name, n) in enumerate(zip(SPLITS, sizes)):
        rng = np.random.default_rng((seed, k))
        labels = rng.permutation(np.arange(n) % num_classes)
        exs = _fill_split(draw_for(labels), n, rng, taken)
        taken.update(e.src for e in exs)
        splits[name] = Dataset(CLASSIFY, vocab_size, (lo, hi), exs, name, seed, num_classes)
    return TaskData(**splits)


@dataclass
class Batch:
    """Padded index arrays for one minibatch; masks are true at real tokens."""

    src: np.ndarray
    tgt: np.ndarray | None
    labels: np.ndarray | None
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray | None:
        return None if self.tgt is None else self.tgt != PAD

    def __len__(self) -> int:
        return self.src.shape[0]


def pad(seqs, pad_id: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(examples: list[Example], indices=None) -> Batch:
    src = pad([e.src for e in examples])
    tgt = pad([e.tgt for e in examples]) if examples[0].tgt is not None else None
    labels = np.array([e.label for e in examples], dtype=np.int64) if examples[0].label is not None else None
    idx = np.arange(len(examples)) if indices is None else np.asarray(indices)
    return Batch(src, tgt, labels, idx)


def batches(dataset: Dataset, batch_size: int, shuffle_seed=None) -> Iterator[Batch]:
    """One pass over ``dataset``. ``shuffle_seed`` (int or tuple) fixes the order;
    ``None`` keeps dataset order."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield collate([dataset.examples[i] for i in idx], idx)


def dump_dataset(dataset: Dataset, path) -> None:
    """Write one example per line: ``src<TAB>tgt`` or ``src<TAB>label``."""
    lo, hi = dataset.len_range
    lines = [
        f"# kind={dataset.kind} vocab={dataset.vocab_size} len={lo},{hi} split={dataset.split} "
        f"seed={dataset.seed} classes={dataset.num_classes or 0}"
    ]
    for e in dataset.examples:
        right = str(e.label) if e.label is not None else " ".join(map(str, e.tgt))
        lines.append(" ".join(map(str, e.src)) + "\t" + right)
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing dataset header line")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split())
    kind = meta["kind"]
    lo, hi = (int(x) for x in meta["len"].split(","))
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            left, right = line.split("\t")
            src = tuple(int(t) for t in left.split())
            if kind == CLASSIFY:
                examples.append(Example(src, label=int(right)))
            else:
                examples.append(Example(src, tuple(int(t) for t in right.split())))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed example line") from exc
    classes = int(meta.get("classes", 0)) or None
    return Dataset(kind, int(meta["vocab"]), (lo, hi), examples, meta["split"], int(meta["seed"]), classes)
