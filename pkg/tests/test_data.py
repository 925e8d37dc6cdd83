from collections import Counter

import numpy as np
import pytest

from drophead.data import (
    BOS,
    EOS,
    FIRST_TOKEN,
    PAD,
    batches,
    dump_dataset,
    gen_classification,
    gen_transduction,
    load_dataset,
    transduce,
)
from drophead.model import ModelConfig, TransformerModel, seq2seq_loss


@pytest.mark.parametrize(
    "kind,src,tgt",
    [("copy", [5, 9, 2], [BOS, 5, 9, 2, EOS]), ("reverse", [5, 9, 2], [BOS, 2, 9, 5, EOS]),
     ("sort", [9, 2, 5], [BOS, 2, 5, 9, EOS])],
)
def test_transduce(kind, src, tgt):
    assert list(transduce(kind, src)) == tgt


@pytest.fixture(scope="module")
def copy_data():
    return gen_transduction("copy", 3, vocab_size=12, len_range=(2, 6), sizes=(500, 200, 200))


def test_transduction_targets_and_vocab(copy_data):
    for split in (copy_data.train, copy_data.dev, copy_data.test):
        for ex in split.examples:
            assert ex.tgt == transduce("copy", ex.src)
            assert all(FIRST_TOKEN <= t < 12 for t in ex.src)
            assert 2 <= len(ex.src) <= 6


def test_splits_disjoint(copy_data):
    srcs = [{e.src for e in d.examples} for d in (copy_data.train, copy_data.dev, copy_data.test)]
    assert not (srcs[0] & srcs[1] or srcs[0] & srcs[2] or srcs[1] & srcs[2])


def test_deterministic(copy_data):
    again = gen_transduction("copy", 3, vocab_size=12, len_range=(2, 6), sizes=(500, 200, 200))
    assert again.train.examples == copy_data.train.examples
    assert gen_transduction("copy", 4, vocab_size=12, len_range=(2, 6), sizes=(500, 200, 200)).train.examples \
        != copy_data.train.examples


@pytest.mark.parametrize("kw", [{"vocab_size": 3}, {"len_range": (0, 4)}, {"sizes": (10, 0, 10)}])
def test_transduction_errors(kw):
    with pytest.raises(ValueError):
        gen_transduction("copy", 0, **{"vocab_size": 16, "len_range": (2, 4), "sizes": (5, 5, 5), **kw})


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_transduction("shuffle", 0)


class TestClassification:
    def test_balanced_and_labelled_by_keyword(self):
        data = gen_classification(1, vocab_size=20, sizes=(1000, 1000, 8), num_classes=4)
        assert Counter(e.label for e in data.dev.examples) == {0: 250, 1: 250, 2: 250, 3: 250}
        for e in data.dev.examples:
            keywords = [t for t in e.src if FIRST_TOKEN <= t < FIRST_TOKEN + 4]
            assert keywords == [FIRST_TOKEN + e.label]

    def test_same_seed_same_data(self):
        a = gen_classification(5, sizes=(50, 20, 20))
        b = gen_classification(5, sizes=(50, 20, 20))
        assert a.train.examples == b.train.examples

    @pytest.mark.parametrize("kw", [{"num_classes": 5, "num_keywords": 4}, {"num_classes": 1},
                                    {"vocab_size": 7, "num_classes": 4}])
    def test_inconsistent(self, kw):
        with pytest.raises(ValueError):
            gen_classification(0, **{"sizes": (5, 5, 5), **kw})


class TestBatches:
    def test_batch_size_one_is_unpadded(self, copy_data):
        for batch, ex in zip(batches(copy_data.dev, 1), copy_data.dev.examples):
            assert batch.src.tolist() == [list(ex.src)] and batch.src_mask.all()

    def test_shuffle_is_seeded(self, copy_data):
        a = [b.indices.tolist() for b in batches(copy_data.train, 64, shuffle_seed=(1, 0))]
        b = [b.indices.tolist() for b in batches(copy_data.train, 64, shuffle_seed=(1, 0))]
        c = [b.indices.tolist() for b in batches(copy_data.train, 64, shuffle_seed=(1, 1))]
        assert a == b and a != c
        assert sorted(sum(a, [])) == list(range(len(copy_data.train)))

    def test_padding_masks(self, copy_data):
        batch = next(batches(copy_data.train, 16))
        assert ((batch.src == PAD) == ~batch.src_mask).all()

    def test_rejects_zero_batch(self, copy_data):
        with pytest.raises(ValueError):
            next(batches(copy_data.train, 0))

    def test_padding_contributes_nothing_to_loss(self):
        cfg = ModelConfig(num_layers=1, d_model=16, d_ff=16, vocab_size=12, dtype="float64")
        model = TransformerModel.init(cfg, seed=2)
        src = np.array([[4, 7, 5]])
        tgt = np.array([[BOS, 4, 7, 5, EOS]])
        base = seq2seq_loss(model, src, tgt)[0].item()
        padded_src = np.array([[4, 7, 5, PAD, PAD]])
        padded_tgt = np.array([[BOS, 4, 7, 5, EOS, PAD, PAD]])
        assert seq2seq_loss(model, padded_src, padded_tgt)[0].item() == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("classification", [False, True])
def test_dump_load_round_trip(tmp_path, classification):
    data = gen_classification(2, sizes=(5, 5, 5)) if classification else gen_transduction("sort", 2, sizes=(5, 5, 5))
    dump_dataset(data.dev, tmp_path / "dev.txt")
    back = load_dataset(tmp_path / "dev.txt")
    assert back == data.dev


def test_load_rejects_malformed(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# kind=copy vocab=8 len=1,3 split=dev seed=0 classes=0\n3 4 5\n")
    with pytest.raises(ValueError, match=":2:"):
        load_dataset(p)
