import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from routecloud import trainer as trainer_mod
from routecloud.checkpoint import Checkpoint, read_sections, write_sections
from routecloud.dataset import load_dataset, save_dataset, synthetic_dataset
from routecloud.decoder import DecoderConfig
from routecloud.encoder import EncoderConfig
from routecloud.errors import ConfigError, FormatError, TrainingError, ValidationError
from routecloud.lds import LdsWeightTable
from routecloud.model import Model, ModelConfig
from routecloud.tensor import Tensor
from routecloud.trainer import (AdamW, Schedule, TrainConfig, loss_gradients, lr_at, split_indices,
                                train)

RES = (16, 16)


def tiny_model_config():
    enc = EncoderConfig(n_stages=2, d_model=4, k=2, base_resolution=RES)
    return ModelConfig(enc, DecoderConfig(in_channels=4, widths=(4, 8), blocks=(1, 1)))


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(6, seed=3, n_nodes=120, resolution=RES)


class TestSchedule:
    sched = Schedule(total_steps=1000, warmup_steps=100, base_lr=1e-3)

    def test_start(self):
        assert lr_at(0, self.sched) == 0.0

    def test_end_of_warmup(self):
        assert lr_at(100, self.sched) == 0.001

    def test_final(self):
        assert lr_at(1000, self.sched) <= 1e-9 * 1e-3

    def test_continuous_at_boundary(self):
        assert abs(lr_at(100, self.sched) - lr_at(99, self.sched)) <= 1e-3 / 100 + 1e-15

    def test_monotone_decay_after_warmup(self):
        lrs = [lr_at(s, self.sched) for s in range(100, 1001)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_from_config(self):
        s = Schedule.from_config(TrainConfig(epochs=100, warmup_epochs=10), steps_per_epoch=3)
        assert (s.total_steps, s.warmup_steps) == (300, 30)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at(-1, self.sched)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.warmup_epochs, c.base_lr) == (100, 10, 0.001)

    @pytest.mark.parametrize("kw", [dict(epochs=10, warmup_epochs=10), dict(base_lr=0.0),
                                    dict(precision="f16"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_verification_disables_clip(self):
        assert TrainConfig(verification=True).clip is None
        assert TrainConfig().clip == 5.0


class TestAdamW:
    def test_zero_gradient_applies_only_decay(self, rng):
        w = rng.normal(size=(3, 3))
        params = {"w": Tensor(w.copy(), requires_grad=True)}
        AdamW(params, weight_decay=0.01).step({"w": np.zeros((3, 3))}, lr=0.1)
        np.testing.assert_allclose(params["w"].data, w - 0.1 * 0.01 * w, rtol=0, atol=1e-16)

    def test_first_step_is_sign_times_lr(self, rng):
        w = rng.normal(size=5)
        g = rng.normal(size=5)
        params = {"w": Tensor(w.copy(), requires_grad=True)}
        AdamW(params, weight_decay=0.0, eps=0.0).step({"w": g}, lr=0.01)
        np.testing.assert_allclose(params["w"].data, w - 0.01 * np.sign(g), atol=1e-15)

    def test_descends_quadratic(self):
        params = {"x": Tensor(np.array([3.0, -2.0]), requires_grad=True)}
        opt = AdamW(params, weight_decay=0.0)
        for _ in range(500):
            opt.step({"x": 2 * params["x"].data}, lr=0.05)
        assert np.abs(params["x"].data).max() < 1e-2


class TestCheckpoint:
    def test_sections_round_trip(self, tmp_path, rng):
        secs = {"config": {"a": [1, 2], "b": "x"}, "f8": rng.normal(size=(2, 3)),
                "f4": rng.normal(size=4).astype(np.float32), "i8": np.arange(5), "scalar": np.array(2.5)}
        write_sections(tmp_path / "c.cfck", secs)
        back = read_sections(tmp_path / "c.cfck")
        assert back["config"] == secs["config"]
        for k in ("f8", "f4", "i8", "scalar"):
            assert back[k].dtype == secs[k].dtype and back[k].tobytes() == secs[k].tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.cfck").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            Checkpoint.load(tmp_path / "x.cfck")

    def test_truncated(self, tmp_path, rng):
        write_sections(tmp_path / "c.cfck", {"config": {}, "a": rng.normal(size=100)})
        raw = (tmp_path / "c.cfck").read_bytes()
        (tmp_path / "c.cfck").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            Checkpoint.load(tmp_path / "c.cfck")

    def test_model_round_trip_bit_exact(self, tmp_path, tiny_data):
        res = train(tiny_data[:2], tiny_model_config(), TrainConfig(epochs=2, warmup_epochs=1, val_fraction=0.0))
        res.checkpoint.save(tmp_path / "m.cfck")
        back = Checkpoint.load(tmp_path / "m.cfck")
        for k, v in res.checkpoint.params.items():
            assert back.params[k].tobytes() == v.tobytes()
            assert back.adam_m[k].tobytes() == res.checkpoint.adam_m[k].tobytes()
        assert back.state == res.checkpoint.state
        a = res.model.predict(tiny_data[0].nodes)
        b = back.model().predict(tiny_data[0].nodes)
        assert a.tobytes() == b.tobytes()


class TestTrain:
    def test_split(self):
        tr, va = split_indices(200, 0.1, seed=0)
        assert len(va) == 20 and sorted(tr + va) == list(range(200))
        assert split_indices(4, 0.1, 0)[1] == []
        assert split_indices(200, 0.1, 0) == (tr, va)

    def test_loss_decreases_and_history(self, tiny_data):
        res = train(tiny_data, tiny_model_config(),
                    TrainConfig(epochs=12, warmup_epochs=1, base_lr=3e-3, batch_size=2, val_fraction=0.2))
        losses = [h["loss"] for h in res.history]
        assert len(res.history) == 12 and losses[-1] < losses[0]
        assert all("val_pearson" in h for h in res.history)
        assert len(res.extra["val_names"]) == 1

    def test_best_checkpoint_kept(self, tiny_data):
        res = train(tiny_data, tiny_model_config(),
                    TrainConfig(epochs=4, warmup_epochs=1, base_lr=3e-3, val_fraction=0.2))
        best = max(h["val_pearson"] for h in res.history)
        assert res.checkpoint.state["best_score"] == best
        for k, v in res.model.params.items():
            assert v.data.tobytes() == res.checkpoint.best_params[k].tobytes()

    def test_resume_is_bit_identical(self, tmp_path, tiny_data):
        cfg = TrainConfig(epochs=4, warmup_epochs=1, base_lr=3e-3, batch_size=2, val_fraction=0.2, seed=5)
        with threadpool_limits(limits=1):
            full = train(tiny_data, tiny_model_config(), cfg)
            part = train(tiny_data, tiny_model_config(), cfg, out_dir=tmp_path, stop_after_epoch=2)
            assert part.stopped_early and len(part.history) == 2
            resumed = train(tiny_data, resume=tmp_path / "model.cfck")
        for k, v in full.checkpoint.params.items():
            assert resumed.checkpoint.params[k].tobytes() == v.tobytes(), k
            assert resumed.checkpoint.adam_v[k].tobytes() == full.checkpoint.adam_v[k].tobytes()
        assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]

    def test_nan_loss_aborts_with_dump(self, tmp_path, tiny_data, monkeypatch):
        real = trainer_mod.weighted_mse

        def poisoned(pred, label, table=None):
            loss = real(pred, label, table)
            return loss * Tensor(np.nan)

        monkeypatch.setattr(trainer_mod, "weighted_mse", poisoned)
        with pytest.raises(TrainingError, match="non-finite loss at step 0"):
            train(tiny_data[:2], tiny_model_config(), TrainConfig(epochs=2, warmup_epochs=1, val_fraction=0.0),
                  out_dir=tmp_path)
        assert (tmp_path / "nan_batch.npz").exists()

    def test_label_resolution_mismatch(self, tiny_data):
        cfg = ModelConfig.desk()  # 64 x 64
        with pytest.raises(ValidationError, match="does not match"):
            train(tiny_data, cfg, TrainConfig(epochs=2, warmup_epochs=1))

    def test_empty_dataset(self):
        with pytest.raises(ValidationError):
            train([], tiny_model_config())

    def test_lds_changes_gradients(self, tiny_data):
        model = Model(tiny_model_config())
        table = LdsWeightTable.from_labels([s.label for s in tiny_data])
        _, g_plain = loss_gradients(model, tiny_data[0])
        _, g_lds = loss_gradients(model, tiny_data[0], table)
        assert any(not np.allclose(g_plain[k], g_lds[k]) for k in g_plain)

    def test_max_steps(self, tiny_data):
        res = train(tiny_data, tiny_model_config(),
                    TrainConfig(epochs=10, warmup_epochs=1, batch_size=2, val_fraction=0.0), max_steps=5)
        assert res.checkpoint.state["step"] == 5


class TestDataset:
    def test_round_trip(self, tmp_path, tiny_data):
        save_dataset(tmp_path, tiny_data[:3])
        back = load_dataset(tmp_path)
        assert [s.name for s in back] == [s.name for s in tiny_data[:3]]
        for a, b in zip(back, tiny_data):
            np.testing.assert_array_equal(a.nodes.as_array(), b.nodes.as_array())
            np.testing.assert_array_equal(a.label.values, b.label.values)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)

    def test_unpaired_node_file_skipped(self, tmp_path, tiny_data):
        save_dataset(tmp_path, tiny_data[:2])
        (tmp_path / f"{tiny_data[1].name}.label.txt").unlink()
        assert [s.name for s in load_dataset(tmp_path)] == [tiny_data[0].name]

    def test_synthetic_is_seeded(self):
        a = synthetic_dataset(2, seed=9, n_nodes=50, resolution=(8, 8))
        b = synthetic_dataset(2, seed=9, n_nodes=50, resolution=(8, 8))
        assert all(x.nodes.as_array().tobytes() == y.nodes.as_array().tobytes() for x, y in zip(a, b))
        assert not math.isclose(a[0].nodes.x[0], a[1].nodes.x[0])
