import os
from pathlib import Path

import numpy as np
import pytest

from drophead.data import FIRST_TOKEN, gen_classification
from drophead.model import CLASSIFIER, ModelConfig, TransformerModel

REPORT_DIR = Path(os.environ.get("DROPHEAD_REPORT_DIR", Path(__file__).resolve().parent.parent / "reports"))

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, ok, detail)``."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.append((name, "PASS" if ok else "FAIL", detail))
        print(f"{name} {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, verdict, detail in sorted(_CRITERIA, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name}: {verdict}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_separable_toy(num_heads: int = 4, signal_head: int = 0, seed: int = 0):
    """Classifier where one head carries the whole class signal.

    Keyword tokens embed as +-(e0 - e1); distractors live in dims 4.. with
    zero mean. The signal head attends uniformly (zero query/key), reads
    ``(x0 - x1) / 2`` and writes it to dims 2 and 3 with opposite signs; the
    classifier reads dim 2. All other heads and the feed-forward block have
    zero weights, and positions are zeroed.
    """
    d, vocab = 8, 12
    cfg = ModelConfig(architecture=CLASSIFIER, num_layers=1, num_heads=num_heads, d_model=d, d_ff=4,
                      vocab_size=vocab, max_len=16, num_classes=2, ff_dropout=0.0, dtype="float64")
    model = TransformerModel.init(cfg, seed=seed)
    for name, p in model.params.items():
        if not name.endswith(".g"):
            p.data[...] = 0.0
    model.positions[...] = 0.0
    r = np.random.default_rng(seed)
    emb = model.params["embed"].data
    emb[FIRST_TOKEN, :2] = (1.0, -1.0)
    emb[FIRST_TOKEN + 1, :2] = (-1.0, 1.0)
    for t in range(FIRST_TOKEN + 2, vocab):
        v = r.normal(size=d - 4)
        v -= v.mean()
        emb[t, 4:] = v * (np.sqrt(2.0) / np.linalg.norm(v))
    dh = d // num_heads
    col = signal_head * dh
    wv, wo = model.params["enc.0.self.wv"].data, model.params["enc.0.self.wo"].data
    wv[0, col], wv[1, col] = 0.5, -0.5
    wo[col, 2], wo[col, 3] = 1.0, -1.0
    cls = model.params["cls.w"].data
    cls[2, 0], cls[2, 1] = 1.0, -1.0
    data = gen_classification(seed, vocab_size=vocab, len_range=(4, 10), sizes=(10, 200, 10), num_classes=2)
    return model, data.dev


@pytest.fixture
def separable_toy():
    return build_separable_toy()
