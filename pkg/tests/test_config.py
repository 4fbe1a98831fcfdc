import json

import pytest

from stereodistill.config import (
    Config,
    apply_overrides,
    desk_profile,
    from_flat,
    full_profile,
    load_config,
    save_config,
    to_flat,
)
from stereodistill.errors import ConfigError


class TestProfiles:
    def test_full_profile_hyperparameters(self):
        cfg = full_profile()
        t = cfg.train
        assert t.epochs == 50 and t.batch_size == 12
        assert t.lr == pytest.approx(1e-4)
        assert t.lr_halve_epochs == (30, 40)
        assert t.adam_beta1 == 0.5 and t.adam_beta2 == 0.999
        w = t.weights
        assert (w.lambda1, w.lambda2, w.lambda3) == (0.0008, 0.01, 0.0016)
        assert w.beta == 0.01 and w.gamma == 2.0 and w.sd_start_epoch == 25
        th = t.thresholds
        assert (th.alpha, th.epsilon, th.t1, th.t2, th.k) == (0.15, 1e-5, 0.2, 0.5, 61)
        assert (t.levels.d_min, t.levels.d_max, t.levels.n) == (2.0, 300.0, 49)
        assert (t.aug.resize_min, t.aug.resize_max) == (0.75, 1.5)
        assert (t.aug.crop_h, t.aug.crop_w) == (192, 640)

    def test_desk_profile_is_small(self):
        cfg = desk_profile()
        assert cfg.train.levels.n == 17 and cfg.train.levels.d_max == 40.0
        assert (cfg.train.aug.crop_h, cfg.train.aug.crop_w) == (96, 320)
        assert cfg.train.batch_size == 4
        assert cfg.train.weights.sd_start_epoch < cfg.train.epochs


class TestFlatRoundTrip:
    def test_round_trip(self):
        cfg = desk_profile()
        flat = to_flat(cfg)
        assert flat["train.epochs"] == cfg.train.epochs
        assert flat["train.weights.lambda2"] == cfg.train.weights.lambda2
        rebuilt = from_flat(flat, base=full_profile())
        assert to_flat(rebuilt) == flat

    def test_save_and_load(self, tmp_path):
        cfg = desk_profile()
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        loaded = load_config(path)
        assert to_flat(loaded) == to_flat(cfg)

    def test_nested_json_accepted(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"epochs": 3, "weights": {"lambda2": 0.5}}}))
        cfg = load_config(path)
        assert cfg.train.epochs == 3
        assert cfg.train.weights.lambda2 == 0.5

    def test_profile_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"profile": "full"}))
        assert load_config(path).train.epochs == 50

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train.leerning_rate": 1}))
        with pytest.raises(ConfigError, match="leerning_rate"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)


class TestOverrides:
    def test_set_scalar(self):
        cfg = apply_overrides(desk_profile(), ["train.lr=0.002", "train.epochs=3"])
        assert cfg.train.lr == 0.002 and cfg.train.epochs == 3

    def test_set_nested_and_list(self):
        cfg = apply_overrides(desk_profile(), [
            "train.weights.lambda2=0.25",
            "model.stage_channels=[16, 32, 64, 128]",
            "data.root=/tmp/ds",
        ])
        assert cfg.train.weights.lambda2 == 0.25
        assert cfg.model.stage_channels == (16, 32, 64, 128)
        assert cfg.data.root == "/tmp/ds"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(desk_profile(), ["train.nope=1"])

    def test_malformed(self):
        with pytest.raises(ConfigError):
            apply_overrides(desk_profile(), ["train.lr"])

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides(desk_profile(), ["train.lr=-5"])
        with pytest.raises(ConfigError):
            apply_overrides(desk_profile(), ["train.thresholds.alpha=2.0"])
