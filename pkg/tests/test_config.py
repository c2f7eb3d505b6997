# tests/test_config.py
import json
import sys

import pytest

from adamw_ema.config import config_from_dict, config_to_dict, load_config, split_sweep
from adamw_ema.errors import ConfigError, TimescaleError


def test_round_trip(small_config):
    assert config_from_dict(config_to_dict(small_config)) == small_config


def test_horizon_is_filled_in(small_config):
    assert small_config.total_steps == 2 * 200 // 50
    assert small_config.hp.schedule.total_steps == 8


def test_zero_epochs_keeps_a_valid_horizon(small_flat):
    config = config_from_dict({**small_flat, "epochs": 0})
    assert config.training_steps == 0
    assert config.hp.schedule.total_steps == 1


def test_unknown_keys(small_flat):
    with pytest.raises(ConfigError, match="unknown config keys: \\['lr'\\]"):
        config_from_dict({**small_flat, "lr": 0.1})


def test_horizon_mismatch(small_flat):
    with pytest.raises(ConfigError, match="total_steps"):
        config_from_dict({**small_flat, "total_steps": 99})


def test_rates_from_timescale(small_flat):
    flat = {k: v for k, v in small_flat.items() if k != "eta0"}
    config = config_from_dict({**flat, "tau_iter": 1e3})
    assert config.hp.eta0 == pytest.approx(1e-2)
    flat = {k: v for k, v in small_flat.items() if k != "lam"}
    config = config_from_dict({**flat, "tau_epoch": 10.0})
    # tau_iter = 10 epochs * 4 steps
    assert config.hp.lam == pytest.approx(1 / (1e-2 * 40))


def test_inconsistent_rates(small_flat):
    with pytest.raises(ConfigError, match="inconsistent"):
        config_from_dict({**small_flat, "tau_iter": 5.0})


def test_missing_rates(small_flat):
    flat = {k: v for k, v in small_flat.items() if k != "lam"}
    with pytest.raises(ConfigError, match="need eta0 and lam"):
        config_from_dict(flat)


def test_timescale_errors_are_config_errors(small_flat):
    with pytest.raises(TimescaleError):
        config_from_dict({**small_flat, "lam": 200.0})
    with pytest.raises(TimescaleError):
        config_from_dict({**small_flat, "B": 30})


def test_output_width_matches_task(small_flat):
    with pytest.raises(ConfigError, match="output width"):
        config_from_dict({**small_flat, "classes": 5})


def test_load_toml_and_json(tmp_path, small_flat):
    toml = tmp_path / "run.toml"
    toml.write_text('name = "t"\nwidths = [16, 16, 4]\nN = 200\nB = 50\nfeatures = 8\nclasses = 4\n'
                    'eta0 = 0.01\nlam = 0.1\nepochs = 2\n', encoding="utf-8")
    config = load_config(str(toml), {"init_seed": 7})
    assert config.init.seed == 7
    assert config.net.widths == (16, 16, 4)
    js = tmp_path / "run.json"
    js.write_text(json.dumps(small_flat), encoding="utf-8")
    assert load_config(str(js)).data.N == 200


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("widths = [", encoding="utf-8")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(str(bad))


def test_split_sweep(small_flat):
    base, axes, series, rule = split_sweep({**small_flat, "axes": {"lam": [0.1, 0.2]}, "series": ["lam"]})
    assert "axes" not in base and axes == {"lam": [0.1, 0.2]}
    assert series == ["lam"] and rule == "timescale-fixed"
    with pytest.raises(ConfigError, match="not sweep axes"):
        split_sweep({**small_flat, "axes": {"lam": [0.1]}, "series": ["N"]})
    with pytest.raises(ConfigError, match="axes"):
        split_sweep(small_flat)


def test_interpreter_reads_toml():
    # config files go through the standard-library tomllib
    assert sys.version_info >= (3, 11)
