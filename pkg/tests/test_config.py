import json
from pathlib import Path

import pytest

from r0surrogate.blstm import BlstmConfig
from r0surrogate.config import (ConfigError, PipelineConfig, apply_overrides, from_dict,
                                load_config, parse_override)
from r0surrogate.parallel import worker_count

REPO_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.json"


def test_defaults():
    cfg = from_dict({})
    assert cfg == PipelineConfig()
    assert cfg.qrf.n_trees == 1000
    assert cfg.blstm.epochs == 200 and cfg.blstm.batch_size == 1024
    assert cfg.blstm_for("dataset2").batch_size == 4096
    assert (cfg.uq.lower, cfg.uq.upper) == (0.1587, 0.8413)


def test_repo_config_loads_with_fixed_seeds():
    cfg = load_config(REPO_CONFIG)
    doc = json.loads(REPO_CONFIG.read_text())
    assert cfg.forecast.seed == doc["forecast"]["seed"]
    assert cfg.qrf.seed == doc["qrf"]["seed"]
    assert cfg.blstm.seed == doc["blstm"]["seed"]


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown config section"):
        from_dict({"forecasts": {}})
    with pytest.raises(ConfigError, match="unknown key.*n_tree"):
        from_dict({"qrf": {"n_tree": 3}})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="qrf"):
        from_dict({"qrf": {"n_trees": 0}})
    with pytest.raises(ConfigError):
        from_dict({"seed": -4})
    with pytest.raises(ConfigError):
        from_dict({"blstm": 3})


def test_top_level_seed_fills_unset_section_seeds():
    cfg = from_dict({"seed": 9, "qrf": {"seed": 4}})
    assert (cfg.forecast.seed, cfg.qrf.seed, cfg.blstm.seed) == (9, 4, 9)


def test_overrides():
    assert parse_override("qrf.n_trees=50") == (["qrf", "n_trees"], 50)
    assert parse_override("blstm.head_sizes=[16,8]") == (["blstm", "head_sizes"], [16, 8])
    assert parse_override("io.out_dir=runs/a") == (["io", "out_dir"], "runs/a")
    assert parse_override("seed=3") == (["seed"], 3)
    for bad in ("qrf.n_trees", "n_trees=3", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)
    doc = apply_overrides({"qrf": {"n_trees": 5}}, ["qrf.seed=2", "uq.lower=0.2"])
    assert doc == {"qrf": {"n_trees": 5, "seed": 2}, "uq": {"lower": 0.2}}
    cfg = load_config(None, ["blstm.head_sizes=[16,8]", "impact.rain_window_days=30"])
    assert cfg.blstm.head_sizes == (16, 8)
    assert cfg.impact.rain_window_days == 30


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "bad.json")


def test_round_trip_through_dict():
    cfg = load_config(REPO_CONFIG, ["blstm.hidden_size=16"])
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_threads():
    cfg = PipelineConfig().with_threads(3)
    assert cfg.qrf.n_jobs == 3 and cfg.blstm.threads == 3
    with pytest.raises(ConfigError):
        PipelineConfig().with_threads(-1)
    assert PipelineConfig().with_threads(0).blstm.threads == 0


def test_worker_count():
    assert worker_count(3) == 3
    assert worker_count(0) >= 1
    with pytest.raises(ValueError):
        worker_count(-2)
    with pytest.raises(ValueError):
        BlstmConfig(threads=-1)
