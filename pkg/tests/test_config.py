import json
from pathlib import Path

import pytest

from src.config import (
    DistillConfig,
    LoggingConfig,
    TwparseConfig,
    load_config_file,
    merge_overrides,
    parse_key_value_config,
    resolve_model_path,
)
from src.errors import UsageError


def test_defaults_match_shipped_config():
    shipped = json.loads((Path(__file__).parent.parent / "config.json").read_text(encoding="utf-8"))
    assert TwparseConfig.from_dict(shipped).to_dict() == TwparseConfig().to_dict()


def test_key_value_config_nests_sections():
    data = parse_key_value_config("# comment\ntraining.epochs = 7\ndistill.mode = oracle\n")
    assert data == {"training": {"epochs": "7"}, "distill": {"mode": "oracle"}}
    cfg = TwparseConfig.from_dict(data)
    assert cfg.training.epochs == 7
    assert cfg.distill.mode == "oracle"


def test_key_value_config_rejects_bare_lines():
    with pytest.raises(UsageError):
        parse_key_value_config("training.epochs\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(UsageError):
        load_config_file(str(tmp_path / "nope.json"))
    assert load_config_file(None) == {}


def test_json_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"training": {"seed": 4}}', encoding="utf-8")
    assert TwparseConfig.from_dict(load_config_file(str(path))).training.seed == 4


def test_merge_ignores_none_and_keeps_base():
    base = {"training": {"seed": 1, "epochs": 30}}
    merged = merge_overrides(base, {"training": {"seed": 9, "epochs": None}})
    assert merged == {"training": {"seed": 9, "epochs": 30}}
    assert base["training"]["seed"] == 1


def test_invalid_distill_settings():
    with pytest.raises(UsageError):
        DistillConfig.from_dict({"mode": "beam"})
    with pytest.raises(UsageError):
        DistillConfig.from_dict({"alpha": 1.5})


def test_bad_log_level_falls_back():
    assert LoggingConfig.from_dict({"log_level": "chatty"}).log_level == "INFO"
    assert LoggingConfig.from_dict({"log_level": "debug"}).log_level == "DEBUG"


def test_model_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.setenv("TWPARSE_MODEL_DIR", str(tmp_path))
    assert resolve_model_path("parser.twpm") == str(tmp_path / "parser.twpm")
    assert resolve_model_path("-") == "-"
    monkeypatch.delenv("TWPARSE_MODEL_DIR")
    assert resolve_model_path("parser.twpm") == "parser.twpm"
