import json

import pytest

from tabtoken.config import ConfigManager, ConfigurationError, load_run_config
from tabtoken.schemas import ModelKind, RunConfig, TuningMode


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("TABTOKEN_ENV", "TABTOKEN_SEED", "TABTOKEN_OUTPUT_DIR"):
        monkeypatch.delenv(name, raising=False)


def test_defaults_match_published_tables():
    config = RunConfig()
    t = config.model.transformer
    assert config.model.kind is ModelKind.TRANSFORMER
    assert (t.layer_count, t.head_count, t.ffn_factor) == (3, 8, 4.0 / 3.0)
    assert (t.attention_dropout, t.ffn_dropout, t.residual_dropout) == (0.08, 0.3, 0.1)
    r = config.model.resnet
    assert (r.layer_count, r.layer_size, r.hidden_factor, r.hidden_dropout, r.residual_dropout) == (3, 168, 2.9, 0.5, 0.0)
    assert (config.model.mlp.layer_count, config.model.mlp.dropout) == (3, 0.2)
    assert config.tokenizer.k == 64
    assert (config.pretrain.learning_rate, config.finetune.learning_rate) == (1e-3, 5e-4)
    assert config.pretrain.weight_decay == config.finetune.weight_decay == 2e-4
    assert config.pretrain.batch_size == config.finetune.batch_size == 1024
    assert config.finetune.epochs == 10
    assert config.finetune.tuning_mode is TuningMode.FULL
    assert config.finetune.warm_start is True
    assert (config.protocol.shots, config.protocol.n_subsets, config.protocol.n_seeds) == (5, 30, 10)


def test_base_yaml_restates_the_defaults():
    assert ConfigManager(environment="published").run_config() == RunConfig()


def test_desk_environment_shrinks_the_run():
    config = load_run_config(environment="desk")
    assert config.tokenizer.k == 16
    assert config.model.transformer.layer_count == 1
    assert config.protocol.n_subsets == 5
    assert config.pretrain.learning_rate == 1e-3


def test_environment_variable_selects_environment(monkeypatch):
    monkeypatch.setenv("TABTOKEN_ENV", "desk")
    assert ConfigManager().environment == "desk"


def test_seed_comes_from_environment_variable(monkeypatch):
    monkeypatch.setenv("TABTOKEN_SEED", "42")
    monkeypatch.setenv("TABTOKEN_OUTPUT_DIR", "/tmp/out")
    config = load_run_config()
    assert config.seeds.master == 42
    assert config.paths.output_dir == "/tmp/out"


def test_user_file_and_overrides_layer_in_order(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"tokenizer": {"k": 8}, "objective": {"beta": 0.5}}))
    config = load_run_config(path, overrides={"objective": {"beta": 2.0}})
    assert config.tokenizer.k == 8
    assert config.objective.beta == 2.0
    assert config.model.transformer.head_count == 8


def test_yaml_user_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("finetune:\n  tuning_mode: fix_top_layer\n  warm_start: false\n")
    config = load_run_config(path)
    assert config.finetune.tuning_mode is TuningMode.FIX_TOP_LAYER
    assert config.finetune.warm_start is False


def test_every_offending_key_is_listed():
    with pytest.raises(ConfigurationError) as info:
        load_run_config(overrides={"tokenizer": {"bogus": 1}, "objective": {"beta": -1.0}, "extra": True})
    assert {"tokenizer.bogus", "objective.beta", "extra"} <= set(info.value.keys)
    assert info.value.exit_code == 2


def test_heads_must_divide_token_size():
    with pytest.raises(ConfigurationError, match="divisible"):
        load_run_config(overrides={"tokenizer": {"k": 10}})


def test_missing_user_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_run_config(tmp_path / "absent.yaml")


def test_non_mapping_file_is_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def test_pretrain_fraction_must_be_a_share():
    assert load_run_config(overrides={"pretrain": {"fraction": 0.2}}).pretrain.fraction == 0.2
    with pytest.raises(ConfigurationError) as info:
        load_run_config(overrides={"pretrain": {"fraction": 0.0}})
    assert "pretrain.fraction" in info.value.keys


def test_downstream_transformer_needs_divisible_token_size():
    config = load_run_config(overrides={"model": {"kind": "mlp"}, "finetune": {"model_kind": "transformer"}})
    assert config.finetune.model_kind is ModelKind.TRANSFORMER
    with pytest.raises(ConfigurationError, match="divisible"):
        load_run_config(overrides={"model": {"kind": "mlp"}, "tokenizer": {"k": 10},
                                   "finetune": {"model_kind": "transformer"}})
