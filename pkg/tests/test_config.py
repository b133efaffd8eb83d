"""Strict JSON run configuration and its canonical hash."""

import json

import pytest

from trajdistill import (
    ConfigError,
    RunConfig,
    config_hash,
    load_run_config,
    run_config_from_dict,
)
from trajdistill.config import resolved_dict


def test_empty_document_gives_defaults():
    cfg = run_config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.teacher.hidden == 64
    assert cfg.student.hidden == 16
    assert cfg.distill.k_start == 128
    assert cfg.eval.split == "test"


def test_nested_override_keeps_other_defaults():
    cfg = run_config_from_dict({"teacher": {"hidden": 32}, "distill": {"k_start": 8}})
    assert cfg.teacher.hidden == 32
    assert cfg.teacher.layers == 3
    assert cfg.distill.k_start == 8
    assert cfg.distill.lam == 0.5


def test_unknown_keys_name_their_path():
    with pytest.raises(ConfigError, match=r"config: unknown keys \['teachar'\]"):
        run_config_from_dict({"teachar": {}})
    with pytest.raises(ConfigError, match=r"config\.teacher: unknown keys \['hiden'\]"):
        run_config_from_dict({"teacher": {"hiden": 32}})
    with pytest.raises(ConfigError, match=r"config\.data\.synth"):
        run_config_from_dict({"data": {"synth": {"bogus": 1}}})


def test_leaf_type_checking():
    with pytest.raises(ConfigError, match="config.teacher.hidden"):
        run_config_from_dict({"teacher": {"hidden": "big"}})
    with pytest.raises(ConfigError, match="expected an integer"):
        run_config_from_dict({"teacher": {"hidden": 32.5}})
    with pytest.raises(ConfigError, match="expected an integer"):
        run_config_from_dict({"teacher": {"hidden": True}})
    with pytest.raises(ConfigError, match="expected a number"):
        run_config_from_dict({"distill": {"lam": "half"}})
    with pytest.raises(ConfigError, match="expected a boolean"):
        run_config_from_dict({"distill": {"ablate_data_term": 1}})
    with pytest.raises(ConfigError, match="expected a string"):
        run_config_from_dict({"eval": {"split": 3}})
    with pytest.raises(ConfigError, match="unexpected object"):
        run_config_from_dict({"teacher": {"hidden": {}}})
    with pytest.raises(ConfigError, match="expected an object"):
        run_config_from_dict({"teacher": 5})


def test_int_widens_to_float():
    cfg = run_config_from_dict({"distill": {"lam": 1}})
    assert cfg.distill.lam == 1.0
    assert isinstance(cfg.distill.lam, float)


def test_hash_is_canonical():
    base = run_config_from_dict({})
    explicit = run_config_from_dict({"teacher": {"hidden": 64}})
    changed = run_config_from_dict({"teacher": {"hidden": 32}})
    assert config_hash(base) == config_hash(explicit)
    assert config_hash(base) != config_hash(changed)
    assert len(config_hash(base)) == 64


def test_resolved_dict_round_trips():
    cfg = run_config_from_dict({"pretrain": {"steps": 7}, "eval": {"n_samples": 3}})
    doc = resolved_dict(cfg)
    again = run_config_from_dict(doc)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_load_from_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"distill": {"k_start": 16, "k_target": 2}}))
    cfg = load_run_config(str(p))
    assert cfg.distill.k_start == 16
    assert cfg.distill.k_target == 2


def test_load_rejects_invalid_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(str(p))
