import csv
import json

import numpy as np
import pytest
from conftest import build_separable_toy

from drophead.analysis import (
    ACCURACY,
    NEG_LOSS,
    HeadImportance,
    dominant_head_report,
    head_importance_scores,
    mask_single_head_eval,
    measure,
    pruning_order,
    pruning_sweep,
    write_ablation,
    write_importance,
    write_pruning,
)
from drophead.data import collate, gen_classification
from drophead.model import CLASSIFIER, ForwardOptions, ModelConfig, TransformerModel
from drophead.tensor import Tensor
from drophead.train import batch_loss


def example_losses(model, dataset, site, head, gate_value):
    """Per-example loss with one head's gate set to ``gate_value``."""
    H = model.config.num_heads
    out = []
    for ex in dataset.examples:
        g = np.ones((1, H))
        g[0, head] = gate_value
        loss, _ = batch_loss(model, collate([ex]), ForwardOptions(gates={site: Tensor(g)}), per_example=True)
        out.append(float(loss.data))
    return np.array(out)


class TestAblation:
    def test_zero_head_ablation_is_free(self, separable_toy):
        model, dev = separable_toy
        base = measure(model, dev, metric=NEG_LOSS)
        for head in (1, 2, 3):
            assert mask_single_head_eval(model, dev, 0, head, rescale=False, metric=NEG_LOSS) == base

    def test_signal_head_is_dominant(self):
        model, dev = build_separable_toy(signal_head=2)
        report = dominant_head_report(model, dev, rescale=False)
        assert report.baseline == 1.0
        assert report.per_type["enc_enc"].dominant == [(0, 2, report.grid[(0, 2)])]
        assert report.grid[(0, 2)] < -0.3
        assert all(report.grid[(0, h)] == 0.0 for h in (0, 1, 3))

    def test_ties_go_to_lowest_head(self, separable_toy):
        model, dev = separable_toy
        model.params["enc.0.self.wv"].data[...] = 0.0
        report = dominant_head_report(model, dev, metric=NEG_LOSS)
        assert report.per_type["enc_enc"].dominant[0][:2] == (0, 0)

    def test_rescale_changes_surviving_heads(self, separable_toy):
        model, dev = separable_toy
        plain = mask_single_head_eval(model, dev, 0, 1, rescale=False, metric=NEG_LOSS)
        scaled = mask_single_head_eval(model, dev, 0, 1, rescale=True, metric=NEG_LOSS)
        assert plain != scaled

    @pytest.mark.parametrize("site,head", [(1, 0), (-1, 0), (0, 4), (0, -1)])
    def test_bad_indices(self, separable_toy, site, head):
        model, dev = separable_toy
        with pytest.raises(IndexError):
            mask_single_head_eval(model, dev, site, head)

    def test_single_head_model_rejected(self):
        model, dev = build_separable_toy(num_heads=1)
        with pytest.raises(ValueError):
            mask_single_head_eval(model, dev, 0, 0)
        with pytest.raises(ValueError):
            dominant_head_report(model, dev)

    def test_unknown_metric(self, separable_toy):
        with pytest.raises(ValueError):
            measure(*separable_toy, metric="bleu")

    def test_report_files(self, separable_toy, tmp_path):
        report = dominant_head_report(*separable_toy)
        write_ablation(report, tmp_path)
        data = json.loads((tmp_path / "ablation.json").read_text())
        assert data["metric"] == ACCURACY and len(data["grid"]) == 4
        rows = list(csv.reader(open(tmp_path / "ablation.csv")))
        assert rows[0] == ["site", "head", "delta"] and len(rows) == 5


class TestImportance:
    def test_zero_head_scores_exactly_zero(self, separable_toy):
        scores = head_importance_scores(*separable_toy)
        assert [s.score == 0.0 for s in scores] == [False, True, True, True]

    @pytest.mark.parametrize("signal_head", [0, 3])
    def test_matches_gate_finite_difference(self, signal_head):
        model, dev = build_separable_toy(signal_head=signal_head)
        dev.examples = dev.examples[:40]
        scores = head_importance_scores(model, dev, batch_size=16)
        h = 1e-5
        fd = (example_losses(model, dev, 0, signal_head, 1 + h) - example_losses(model, dev, 0, signal_head, 1 - h)) / (2 * h)
        ref = np.abs(fd).mean()
        assert abs(scores[signal_head].score - ref) <= 1e-4 * ref

    def test_duplicated_heads_score_equal(self):
        model, dev = build_separable_toy()
        wv, wo = model.params["enc.0.self.wv"].data, model.params["enc.0.self.wo"].data
        dh = 2
        wv[:, 2 * dh] = wv[:, 0]
        wo[2 * dh] = wo[0] / 2
        wo[0] /= 2
        scores = head_importance_scores(model, dev)
        assert scores[0].score > 0
        assert abs(scores[0].score - scores[2].score) <= 1e-10 * scores[0].score

    def test_leaves_parameter_gradients_clear(self, separable_toy):
        model, dev = separable_toy
        head_importance_scores(model, dev)
        assert all(p.grad is None for p in model.params.values())

    def test_normalization(self):
        model, dev = build_separable_toy()
        model.params["enc.0.self.wv"].data[0, 2] = 0.3
        model.params["enc.0.self.wo"].data[2, 2] = 1.0
        scores = head_importance_scores(model, dev, normalize=True)
        norms = np.array([s.normalized for s in scores])
        assert np.isclose(np.linalg.norm(norms), 1.0)
        assert all(isinstance(s.normalized, float) for s in scores)

    def test_labels_and_files(self, separable_toy, tmp_path):
        scores = head_importance_scores(*separable_toy)
        assert {(s.stack, s.layer, s.kind) for s in scores} == {("encoder", 0, "enc_enc")}
        write_importance(scores, tmp_path)
        rows = list(csv.reader(open(tmp_path / "importance.csv")))
        assert rows[0] == ["stack", "layer", "type", "head", "score", "normalized"] and len(rows) == 5

    def test_empty_dataset(self, separable_toy):
        model, dev = separable_toy
        dev.examples = []
        with pytest.raises(ValueError):
            head_importance_scores(model, dev)


def two_layer_classifier(heads=2):
    cfg = ModelConfig(architecture=CLASSIFIER, num_layers=2, num_heads=heads, d_model=8, d_ff=8,
                      vocab_size=12, num_classes=2, dtype="float64")
    data = gen_classification(0, vocab_size=12, len_range=(4, 8), sizes=(10, 60, 10), num_classes=2)
    return TransformerModel.init(cfg, seed=3), data.dev


def fake_scores(order):
    return [HeadImportance("encoder", s, "enc_enc", h, float(rank), s) for rank, (s, h) in enumerate(order)]


class TestPruning:
    def test_fraction_zero_is_unpruned(self, separable_toy):
        model, dev = separable_toy
        curve = pruning_sweep(model, dev, [0.0], metric=NEG_LOSS)
        assert curve[0].pruned == 0 and curve[0].metric == measure(model, dev, metric=NEG_LOSS)

    def test_pruning_zero_heads_changes_nothing(self, separable_toy):
        model, dev = separable_toy
        base = measure(model, dev, metric=NEG_LOSS)
        curve = pruning_sweep(model, dev, [0.25, 0.5, 0.75], rescale=False, metric=NEG_LOSS)
        assert [p.pruned for p in curve] == [1, 2, 3]
        assert curve[-1].keep == {0: [1, 0, 0, 0]}
        for p in curve:
            assert abs(p.metric - base) <= 1e-12

    def test_last_head_is_pinned(self):
        model, dev = two_layer_classifier()
        scores = fake_scores([(0, 0), (0, 1), (1, 0), (1, 1)])
        (point,) = pruning_sweep(model, dev, [0.75], scores=scores)
        assert point.pruned == 2 and point.pinned == [0, 1]
        assert point.keep == {0: [0, 1], 1: [0, 1]}

    def test_order_breaks_ties_by_position(self):
        scores = [HeadImportance("encoder", 0, "enc_enc", h, 0.0, s) for s in (1, 0) for h in (1, 0)]
        assert pruning_order(scores) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    @pytest.mark.parametrize("fractions", [[0.5, 0.25], [1.0], [-0.1]])
    def test_bad_fractions(self, separable_toy, fractions):
        with pytest.raises(ValueError):
            pruning_sweep(*separable_toy, fractions)

    def test_files(self, separable_toy, tmp_path):
        curve = pruning_sweep(*separable_toy, [0.0, 0.25, 0.5])
        write_pruning(curve, tmp_path)
        rows = list(csv.reader(open(tmp_path / "pruning.csv")))
        assert rows[0] == ["fraction", "pruned", "metric", "pinned_sites"] and len(rows) == 4
        assert len(json.loads((tmp_path / "pruning.json").read_text())) == 3
