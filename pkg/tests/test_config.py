import json

import pytest

from kode.config import ConfigError, RunConfig, TransferConfig, load_config, parse_config


def test_defaults_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.to_dict()) == cfg
    assert parse_config({}) == cfg
    assert load_config(None) == cfg


def test_partial_sections_and_nested_losses():
    cfg = parse_config({"train": {"epochs": 3, "losses": {"beta": 0.5}}, "encoder": {"fourier_scale": [0.5] * 6}})
    assert cfg.train.epochs == 3 and cfg.train.losses.beta == 0.5
    assert cfg.encoder.fourier_scale == (0.5,) * 6
    assert cfg.dataset == RunConfig().dataset


def test_int_promotes_to_float():
    assert parse_config({"plant": {"mu": 1}}).plant.mu == 1.0


@pytest.mark.parametrize("bad, where", [
    ({"trian": {}}, "config.trian"),
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"train": {"epochs": "3"}}, "train.epochs"),
    ({"train": {"epochs": 2.5}}, "train.epochs"),
    ({"train": {"epochs": True}}, "train.epochs"),
    ({"train": {"n_ops": 3}}, "train"),
    ({"encoder": {"fourier_scale": [1.0, 2.0]}}, "encoder.fourier_scale"),
    ({"eval": {"split": "dev"}}, "eval"),
    ({"transfer": {"lr0": 0}}, "transfer"),
    ([], "config"),
])
def test_invalid_configs_name_the_location(bad, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        parse_config(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        (tmp_path / "c.json").write_text("{")
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_overrides_skip_none_and_revalidate():
    cfg = RunConfig().with_overrides(train={"seed": 3, "epochs": None})
    assert cfg.train.seed == 3 and cfg.train.epochs == RunConfig().train.epochs
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(train={"batch": 0})


def test_file_round_trip(tmp_path):
    cfg = RunConfig().with_overrides(transfer={"mass_scale": 1.3})
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    assert TransferConfig().lr0 == 1e-4
