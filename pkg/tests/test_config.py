import json

import pytest

from mimic_icl.core.config import SECTIONS, Config, load_config
from mimic_icl.core.errors import ConfigError


def test_defaults_build_every_section():
    cfg = Config(use_user_file=False)
    cfg.validate()
    assert cfg.model_config().n_layers == 4
    assert cfg.train_config().lam == 0.5
    assert cfg.variant_config().kind == "mimic"
    assert set(SECTIONS) <= set(cfg.to_dict())


def test_output_directory_follows_environment(tmp_path):
    cfg = Config(use_user_file=False)
    assert cfg.get_output_path() == tmp_path / "outputs"
    assert cfg.get_output_path().is_dir()


def test_set_checks_types():
    cfg = Config(use_user_file=False)
    cfg.set("train.lr", 1)
    assert cfg.get("train.lr") == 1
    with pytest.raises(ConfigError):
        cfg.set("train.epochs", 2.5)
    with pytest.raises(ConfigError):
        cfg.set("train.disjoint_episodes", "yes")
    with pytest.raises(ConfigError):
        cfg.set("train", {})
    with pytest.raises(ConfigError):
        cfg.set("train.learning_rate", 0.1)
    with pytest.raises(ConfigError):
        cfg.set("a.b.c", 1)


def test_nullable_variant_keys():
    cfg = Config(use_user_file=False)
    cfg.set("variant.kind", "lora")
    cfg.set("variant.lora_rank", 4)
    assert cfg.variant_config().lora_rank == 4
    assert cfg.train_config().variant.kind == "lora"
    with pytest.raises(ConfigError):
        cfg.set("variant.lora_rank", "four")


def test_file_round_trip(tmp_path):
    path = tmp_path / "exp.json"
    cfg = Config(use_user_file=False)
    cfg.config_path = path
    cfg.set("seed", 7)
    cfg.set("eval.shots", [1, 2])
    cfg.save()
    loaded = Config(path)
    assert loaded.seed == 7
    assert loaded.eval_config().shots == [1, 2]
    assert loaded.config_hash() == cfg.config_hash()


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        Config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        Config(bad)
    future = tmp_path / "future.json"
    future.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ConfigError, match="schema_version"):
        Config(future)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"train": {"momentum": 0.9}}))
    with pytest.raises(ConfigError):
        Config(unknown)


def test_user_file_is_read(isolated_home):
    (isolated_home / ".mimic-icl").mkdir(parents=True)
    (isolated_home / ".mimic-icl" / "config.json").write_text(json.dumps({"seed": 3}))
    assert Config().seed == 3
    assert Config(use_user_file=False).seed == 0


def test_hash_ignores_output_directory_but_not_values():
    a, b = Config(use_user_file=False), Config(use_user_file=False)
    b.set("output_directory", "/elsewhere")
    assert a.config_hash() == b.config_hash()
    b.set("train.lam", 0.25)
    assert a.config_hash() != b.config_hash()
    assert len(a.config_hash()) == 12


def test_reset_key_and_all():
    cfg = Config(use_user_file=False)
    cfg.set("train.lr", 0.1)
    cfg.set("seed", 4)
    cfg.reset("train.lr")
    assert cfg.get("train.lr") == Config.DEFAULTS["train"]["lr"]
    assert cfg.seed == 4
    cfg.reset()
    assert cfg.seed == 0


def test_load_config_applies_overrides_and_validates():
    cfg = load_config(None, {"train.lam": 0.0, "seed": 5})
    assert cfg.train_config().lam == 0.0
    assert cfg.model_config().seed == 5
    with pytest.raises(ConfigError):
        load_config(None, {"train.lam": -1.0})
    with pytest.raises(ConfigError):
        load_config(None, {"task.alphabet_size": 80})
