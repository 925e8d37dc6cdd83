import struct
from dataclasses import replace

import numpy as np
import pytest

import drophead.attention as attention_mod
from drophead.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from drophead.data import gen_classification, gen_transduction
from drophead.model import CLASSIFIER, ModelConfig, Placement, TransformerModel
from drophead.schedule import ScheduleSpec, drop_rate_at
from drophead.tensor import NonFiniteError, Tensor
from drophead.train import (
    CHECKPOINT_NAME,
    METRICS_HEADER,
    METRICS_NAME,
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_grad_norm,
    evaluate,
    read_metrics,
    train,
)

SMALL = ModelConfig(num_layers=1, num_heads=2, d_model=16, d_ff=32, vocab_size=12, max_len=12)


@pytest.fixture(scope="module")
def tiny_data():
    return gen_transduction("copy", 0, vocab_size=12, len_range=(2, 6), sizes=(200, 50, 20))


def small_cfg(**kw):
    base = dict(model=SMALL, total_steps=12, warmup_steps=4, eval_interval=6, batch_size=8, seed=1)
    return TrainConfig(**{**base, **kw})


class TestAdam:
    def test_first_step_moves_by_lr_against_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
        g = np.array([0.3, -4.0, 1e-3])
        state = AdamState.zeros(p)
        adam_step(p, {"w": g}, state, lr=0.01)
        np.testing.assert_allclose(p["w"].data - [1.0, -2.0, 0.5], -0.01 * np.sign(g), rtol=1e-5)
        assert state.step == 1

    def test_zero_gradient_leaves_parameters(self):
        p = {"w": Tensor(np.ones(3))}
        state = AdamState.zeros(p)
        state.m["w"][...] = 0.0
        state.v["w"][...] = 0.5
        adam_step(p, {"w": np.zeros(3)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, np.ones(3))
        np.testing.assert_allclose(state.v["w"], 0.5 * 0.98)

    def test_nan_gradient_names_parameter(self):
        p = {"enc.0.self.wq": Tensor(np.ones(2))}
        with pytest.raises(NonFiniteError, match="enc.0.self.wq"):
            adam_step(p, {"enc.0.self.wq": np.array([np.nan, 0.0])}, AdamState.zeros(p), lr=0.1)

    @pytest.mark.parametrize("lr", [0.0, -1e-3])
    def test_lr_must_be_positive(self, lr):
        p = {"w": Tensor(np.ones(1))}
        with pytest.raises(ValueError):
            adam_step(p, {"w": np.ones(1)}, AdamState.zeros(p), lr=lr)

    def test_constants(self):
        s = AdamState.zeros({})
        assert (s.beta1, s.beta2, s.eps) == (0.9, 0.98, 1e-9)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose(np.sqrt(sum((g**2).sum() for g in grads.values())), 1.0)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.1


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"arm": "dropconnect"},
            {"total_steps": -1},
            {"base_lr": 0.0},
            {"attn_dropout": 1.0},
            {"arm": "drophead", "schedule": ScheduleSpec("constant", 0.2, 0.2, 4, 99)},
            {"arm": "drophead", "model": replace(SMALL, placement=Placement(False, False, False))},
            {"mask_granularity": "per_token"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw)

    def test_default_schedule_is_v_shaped_on_warmup(self):
        cfg = small_cfg(arm="drophead")
        assert cfg.drop_schedule == ScheduleSpec("v_shaped", 0.2, 0.2, 4, 12)


def test_runs_are_bitwise_reproducible(tiny_data, tmp_path):
    cfg = small_cfg(arm="combination")
    a = train(cfg, tiny_data, tmp_path / "a")
    b = train(cfg, tiny_data, tmp_path / "b")
    for name in (CHECKPOINT_NAME, METRICS_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_zero_rate_drophead_equals_no_drophead(tiny_data):
    zero = small_cfg(arm="drophead", schedule=ScheduleSpec("constant", 0.0, 0.0, 4, 12))
    a = train(zero, tiny_data).model
    b = train(small_cfg(), tiny_data).model
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_total_steps_zero_keeps_initialization(tiny_data, tmp_path):
    res = train(small_cfg(total_steps=0), tiny_data, tmp_path)
    init = TransformerModel.init(SMALL, seed=1)
    loaded = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    assert all(np.array_equal(loaded.params[k].data, init.params[k].data) for k in init.params)
    assert res.metrics == [] and read_metrics(tmp_path / METRICS_NAME) == []


def test_schedule_wiring_audit(tiny_data, monkeypatch):
    seen = {}
    real = attention_mod.sample_head_masks

    def spy(cfg, num_heads, batch):
        seen.setdefault(cfg.step, set()).add(cfg.p)
        return real(cfg, num_heads, batch)

    monkeypatch.setattr(attention_mod, "sample_head_masks", spy)
    spec = ScheduleSpec("v_shaped", 0.3, 0.1, 4, 12)
    res = train(small_cfg(arm="drophead", schedule=spec), tiny_data)
    assert sorted(seen) == list(range(12))
    for step, rates in seen.items():
        assert rates == {drop_rate_at(spec, step)}
    assert res.rates == [drop_rate_at(spec, t) for t in range(12)]


def test_metrics_file(tiny_data, tmp_path):
    res = train(small_cfg(), tiny_data, tmp_path)
    lines = (tmp_path / METRICS_NAME).read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) == "step,train_loss,dev_loss,dev_acc,drop_rate,lr,wall_ms"
    recs = read_metrics(tmp_path / METRICS_NAME)
    assert [r.step for r in recs] == [6, 12] and recs == res.metrics
    assert all(r.wall_ms == 0 for r in recs)
    assert (tmp_path / "timing.csv").read_text().startswith("step,wall_ms\n6,")


def test_wall_clock_opt_in(tiny_data):
    res = train(small_cfg(record_wall_clock=True), tiny_data)
    assert res.metrics[-1].wall_ms > 0


def test_divergence_keeps_partial_artifacts(tiny_data, tmp_path, monkeypatch):
    real_init = TransformerModel.init.__func__

    def poisoned(cls, config, seed=0):
        model = real_init(cls, config, seed)
        model.params["embed"].data[5, 0] = np.inf
        return model

    monkeypatch.setattr(TransformerModel, "init", classmethod(poisoned))
    with pytest.raises(TrainingDiverged) as info:
        train(small_cfg(), tiny_data, tmp_path)
    assert info.value.step == 0
    assert (tmp_path / CHECKPOINT_NAME).exists() and (tmp_path / METRICS_NAME).exists()


class TestEvaluate:
    def test_repeatable_and_round_trip(self, tiny_data, tmp_path):
        model = train(small_cfg(), tiny_data).model
        first = evaluate(model, tiny_data.dev)
        assert evaluate(model, tiny_data.dev) == first
        save_checkpoint(model, tmp_path / "m.dhck")
        assert evaluate(tmp_path / "m.dhck", tiny_data.dev) == first

    def test_untrained_binary_classifier_is_at_chance(self):
        # A single init can lean towards one class; averaged over inits it cannot.
        data = gen_classification(0, vocab_size=16, sizes=(10, 400, 10), num_classes=2)
        cfg = ModelConfig(architecture=CLASSIFIER, num_layers=1, d_model=16, d_ff=16, vocab_size=16, num_classes=2)
        accs = [evaluate(TransformerModel.init(cfg, seed=s), data.dev).accuracy for s in range(20)]
        assert abs(np.mean(accs) - 0.5) <= 4 * np.std(accs, ddof=1) / np.sqrt(len(accs)) + 0.01

    def test_vocab_mismatch(self, tiny_data):
        other = ModelConfig(num_layers=1, d_model=16, d_ff=16, vocab_size=20)
        with pytest.raises(ValueError, match="vocab"):
            evaluate(TransformerModel.init(other), tiny_data.dev)

    def test_exact_match_reported(self, tiny_data):
        res = evaluate(TransformerModel.init(SMALL), tiny_data.test, exact_match=True)
        assert res.exact_match is not None and 0.0 <= res.exact_match <= 1.0


@pytest.mark.slow
def test_copy_task_is_learnable():
    data = gen_transduction("copy", 0)
    res = train(TrainConfig(total_steps=1000, eval_interval=500), data)
    assert res.metrics[-1].dev_acc > 0.99
    assert evaluate(res.model, data.test, exact_match=True).exact_match > 0.8


class TestCheckpointFormat:
    def test_byte_layout(self, tmp_path):
        write_tensors(tmp_path / "t.dhck", {"ab": np.array([[1.0, 2.0]], dtype=np.float32),
                                            "c": np.array(3.0)})
        raw = (tmp_path / "t.dhck").read_bytes()
        assert raw[:4] == MAGIC and struct.unpack_from("<II", raw, 4) == (1, 2)
        off = 12
        assert struct.unpack_from("<I", raw, off) == (2,) and raw[off + 4 : off + 6] == b"ab"
        off += 6
        assert struct.unpack_from("<BB", raw, off) == (0, 2)
        assert struct.unpack_from("<QQ", raw, off + 2) == (1, 2)
        assert struct.unpack_from("<2f", raw, off + 18) == (1.0, 2.0)
        off += 26
        assert struct.unpack_from("<I", raw, off) == (1,) and raw[off + 4 : off + 5] == b"c"
        assert struct.unpack_from("<BB", raw, off + 5) == (1, 0)
        assert struct.unpack_from("<d", raw, off + 7) == (3.0,)
        assert len(raw) == off + 15

    def test_round_trip_preserves_dtype_and_bits(self, tmp_path, rng):
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32)}
        write_tensors(tmp_path / "t.dhck", arrays)
        back = read_tensors(tmp_path / "t.dhck")
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and np.array_equal(back[k], v)

    @pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
    def test_corruption_detected(self, tmp_path, damage):
        path = tmp_path / "t.dhck"
        write_tensors(path, {"a": np.ones(4)})
        raw = bytearray(path.read_bytes())
        if damage == "magic":
            raw[0:4] = b"XXXX"
        elif damage == "truncate":
            raw = raw[:-3]
        elif damage == "trailing":
            raw += b"\0"
        else:
            raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            read_tensors(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            write_tensors(tmp_path / "t.dhck", {"a": np.ones(2, dtype=np.int32)})

    def test_model_checkpoint_round_trip(self, tmp_path):
        model = TransformerModel.init(SMALL, seed=4)
        save_checkpoint(model, tmp_path / "m.dhck")
        back = load_checkpoint(tmp_path / "m.dhck")
        assert back.config == model.config
        assert all(np.array_equal(back.params[k].data, model.params[k].data) for k in model.params)
        assert (tmp_path / "m.json").exists()
