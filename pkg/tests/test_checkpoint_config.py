"""Checkpoint byte layout and TOML run configuration."""

import hashlib

import numpy as np
import pytest

from aga.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from aga.config import RunConfig, build_task, load_run_config
from aga.errors import CheckpointError, ConfigError
from aga.model import AgaModel
from aga.train import TrainConfig, train

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained_state(small_task, small_episodes):
    model = AgaModel(tiny_config(n_classes=small_task.n_classes, d_backbone=small_task.d_backbone), seed=0)
    states = []
    train(model, small_episodes[:8], TrainConfig.desk_scale(epochs=2, batch_size=4), callbacks=[lambda m, s, r: states.append(s)])
    return model, states[-1]


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, trained_state, tmp_path):
        model, state = trained_state
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, Checkpoint.from_model(model, {"seed": 3}, state))
        save_checkpoint(b, load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_layout(self, trained_state):
        model, state = trained_state
        buf = Checkpoint.from_model(model, {}, state).to_bytes()
        assert buf[:8] == MAGIC
        assert int.from_bytes(buf[8:12], "little") == 1
        assert hashlib.sha256(buf[:-32]).digest() == buf[-32:]

    def test_restores_model_and_state(self, trained_state):
        model, state = trained_state
        back = Checkpoint.from_bytes(Checkpoint.from_model(model, {}, state).to_bytes())
        assert back.build_model().checksum() == model.checksum()
        restored = back.train_state()
        assert restored.epoch == state.epoch and restored.optimizer.step == state.optimizer.step
        assert restored.rng_state == state.rng_state
        for k in state.optimizer.m:
            np.testing.assert_array_equal(restored.optimizer.m[k], state.optimizer.m[k])
            np.testing.assert_array_equal(restored.optimizer.v[k], state.optimizer.v[k])

    def test_parameters_only(self, trained_state):
        model, _ = trained_state
        back = Checkpoint.from_bytes(Checkpoint.from_model(model).to_bytes())
        assert back.optimizer is None
        with pytest.raises(CheckpointError):
            back.train_state()

    @pytest.mark.parametrize("where", [0, 40, -40, -1])
    def test_any_flipped_byte_is_refused(self, trained_state, where):
        buf = bytearray(Checkpoint.from_model(trained_state[0]).to_bytes())
        buf[where] ^= 0xFF
        with pytest.raises(CheckpointError, match="hash"):
            Checkpoint.from_bytes(bytes(buf))

    def test_truncated(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"AGACKPT")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="nope.ckpt"):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestRunConfig:
    def test_fills_model_from_task(self):
        cfg = RunConfig.from_dict({"task": {"kind": "history", "d_backbone": 12}})
        spec = cfg.task_spec()
        assert (cfg.model.n_classes, cfg.model.d_backbone, cfg.model.background_class) == (spec.n_classes, 12, spec.background_class)

    def test_seed_flows_to_training(self):
        assert RunConfig.from_dict({"seed": 7}).train.seed == 7
        assert RunConfig.from_dict({"seed": 7}, seed=9).train.seed == 9

    def test_dict_round_trip(self):
        cfg = RunConfig.from_dict({"seed": 2, "model": {"alpha": 0.5}, "train": {"epochs": 3}, "analysis": {"backward": {"eta": 10.0}}})
        again = RunConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    @pytest.mark.parametrize(
        "raw",
        [
            {"modle": {}},
            {"model": {"alpha_": 0.5}},
            {"train": {"lr": 1.0}},
            {"task": {"kind": "spiral"}},
            {"task": {"actions": 3}},
            {"data": {"train_episodes": -1}},
            {"analysis": {"backward": {"steps": 3}}},
            {"model": {"alpha": 1.5}},
            {"train": {"epochs": -1}},
        ],
    )
    def test_rejected_before_work(self, raw):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)

    def test_toml_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('seed = 4\n[task]\nkind = "default"\nn_actions = 5\n[model]\nd_model = 16\n[train]\nepochs = 2\n')
        cfg = load_run_config(path)
        assert (cfg.seed, cfg.model.n_classes, cfg.model.d_model, cfg.train.epochs) == (4, 6, 16, 2)

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("seed = = 1")
        with pytest.raises(ConfigError, match="bad.toml"):
            load_run_config(path)

    def test_task_seed_default(self):
        a, b = build_task({"n_actions": 4}, seed=1), build_task({"n_actions": 4, "seed": 1}, seed=5)
        np.testing.assert_array_equal(a.transition, b.transition)
