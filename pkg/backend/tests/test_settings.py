from __future__ import annotations

import json
from pathlib import Path

import pytest

from pixmot import settings
from pixmot.settings import ConfigError, TrainConfig


def test_env_helpers(monkeypatch, tmp_path):
    monkeypatch.setenv("PIXMOT_HOME", str(tmp_path))
    monkeypatch.setenv("PIXMOT_LOG_LEVEL", "debug")
    monkeypatch.setenv("PIXMOT_SCORER_URL", "http://127.0.0.1:5055/")
    monkeypatch.setenv("PIXMOT_SCORER_WORKERS", "0")
    assert settings.home_dir() == tmp_path
    assert settings.log_level() == "DEBUG"
    assert settings.scorer_url() == "http://127.0.0.1:5055"
    assert settings.scorer_workers() == 1


def test_unset_env_uses_defaults(monkeypatch):
    for name in ("NUM_THREADS", "SCORER_URL", "SCORER_TIMEOUT"):
        monkeypatch.delenv(f"PIXMOT_{name}", raising=False)
    assert settings.num_threads() is None
    assert settings.scorer_url() is None
    assert settings.scorer_timeout() == 10.0


@pytest.mark.parametrize("raw", ["zero", "0", "-3"])
def test_bad_thread_count(monkeypatch, raw):
    monkeypatch.setenv("PIXMOT_NUM_THREADS", raw)
    with pytest.raises(ConfigError):
        settings.num_threads()


def test_defaults_give_toy_noise_scale():
    cfg = TrainConfig()
    noise = cfg.noise_config()
    assert noise.sigma_max == pytest.approx(2.0)
    assert cfg.loss_weights().lambda1 == pytest.approx(0.1)


def test_round_trip_through_file(tmp_path):
    cfg = settings.train_config_from_dict({"steps": 10, "model": {"width": 32, "head_size": 8}, "data": {"count": 3}})
    path = settings.save_train_config(tmp_path / "cfg" / "config.json", cfg)
    assert json.loads(path.read_text())["model"]["width"] == 32
    assert settings.load_train_config(path) == cfg


@pytest.mark.parametrize(
    "raw, message",
    [
        ({"stepz": 3}, "unknown key stepz"),
        ({"model": {"depth": 2}}, "unknown key model.depth"),
        ({"model": [1, 2]}, "model must be an object"),
        ({"steps": 0}, "steps must be positive"),
        ({"ema_ratio": 1.0}, "ema_ratio"),
        ({"lr_schedule": "step"}, "lr_schedule"),
        ({"p_drop_text": 0.6, "p_drop_all": 0.6}, "must not exceed 1"),
        ({"model": {"vocab_size": 20}, "data": {"edit_fraction": 0.25}}, "does not cover"),
        ({"data": {"edit_fraction": 1.5}}, "edit fraction"),
        ({"max_resolution": 32}, "max_resolution"),
        ({"model": {"width": 20, "head_size": 8}}, "invalid model block"),
    ],
)
def test_invalid_configs(raw, message):
    with pytest.raises(ConfigError, match=message):
        settings.train_config_from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        settings.load_train_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        settings.load_train_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError, match="JSON object"):
        settings.load_train_config(tmp_path / "list.json")


@pytest.mark.parametrize("name", ["toy.json", "edit.json", "overfit.json"])
def test_shipped_configs_load(name):
    cfg = settings.load_train_config(Path(__file__).resolve().parents[2] / "configs" / name)
    assert cfg.model.vocab_size >= cfg.data.vocab_size
    assert (cfg.data.edit_fraction > 0) == (name == "edit.json")
