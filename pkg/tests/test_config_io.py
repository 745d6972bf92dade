"""Tests for configuration files and precedence."""
from pathlib import Path

import pytest
import yaml

from labeldenoise.core.config_io import (
    SEED_ENV_VAR,
    config_hash,
    load_config,
    load_domain_spec,
    save_config,
    save_domain_spec,
)
from labeldenoise.core.errors import ConfigError
from labeldenoise.core.models import AdaptationConfig
from labeldenoise.core.synthshift import default_domain_spec


def _write(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data))
    return path


def test_defaults_follow_the_published_settings(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    config = load_config(None)
    assert config.alpha == 0.2
    assert config.epsilon == 3
    assert config.lambda_ent == 1.0 and config.lambda_neg == 1.0
    assert config.momentum == 0.9 and config.weight_decay == 5e-4 and config.poly_power == 0.9
    assert config.loss_reduction == "mean"


def test_precedence_flag_env_file_default(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    path = _write(tmp_path / "config.yaml", {"seed": 1, "alpha": 0.5})
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    assert load_config(path).seed == 1

    monkeypatch.setenv(SEED_ENV_VAR, "7")
    assert load_config(path).seed == 7
    assert load_config(path, {"seed": 11}).seed == 11
    assert load_config(path, {"seed": None}).seed == 7
    assert load_config(path).alpha == 0.5


def test_integers_are_accepted_for_float_fields(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    config = load_config(_write(tmp_path / "config.yaml", {"lambda_neg": 2, "alpha": 1}))
    assert isinstance(config.lambda_neg, float)
    assert config.alpha == 1.0


def test_invalid_configs_are_rejected(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    with pytest.raises(ConfigError, match="Unknown"):
        load_config(_write(tmp_path / "a.yaml", {"alpha": 0.2, "gamma": 3}))
    with pytest.raises(ConfigError, match="alpha"):
        load_config(_write(tmp_path / "b.yaml", {"alpha": 0.0}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "c.yaml", {"epsilon": "three"}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "d.yaml", {"disable_pos": True, "disable_neg": True}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "e.yaml", {"method": "dann"}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "f.yaml").write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "f.yaml")
    monkeypatch.setenv(SEED_ENV_VAR, "not-a-number")
    with pytest.raises(ConfigError, match=SEED_ENV_VAR):
        load_config(None)


def test_save_and_reload(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    config = AdaptationConfig(alpha=0.35, method="shot_im", seed=4)
    save_config(tmp_path / "run" / "config.yaml", config)
    text = (tmp_path / "run" / "config.yaml").read_text()
    assert text.startswith("# labeldenoise")
    reloaded = load_config(tmp_path / "run" / "config.yaml")
    assert reloaded == config
    assert config_hash(reloaded) == config_hash(config)
    assert config_hash(AdaptationConfig(alpha=0.3)) != config_hash(AdaptationConfig())


def test_domain_spec_round_trip(tmp_path: Path) -> None:
    spec = default_domain_spec(5, seed=9)
    save_domain_spec(tmp_path / "spec.yaml", spec)
    assert load_domain_spec(tmp_path / "spec.yaml") == spec


def test_ablation_switches() -> None:
    config = AdaptationConfig().with_ablation("no-neg")
    assert config.disable_neg and not config.disable_pos
    config.with_ablation("none")
    assert not config.disable_neg
    with pytest.raises(ConfigError):
        config.with_ablation("no-ent")


@pytest.mark.parametrize("ablation", ["no-pos", "no-neg"])
def test_ablations_are_rejected_outside_ld(ablation: str) -> None:
    assert AdaptationConfig(method="ld").with_ablation(ablation).validate().method == "ld"
    with pytest.raises(ConfigError, match="only apply to method 'ld'"):
        AdaptationConfig(method="pseudo").with_ablation(ablation).validate()
    AdaptationConfig(method="pseudo").with_ablation("none").validate()


def test_config_hash_ignores_execution_settings() -> None:
    config = AdaptationConfig()
    assert config_hash(config) == config_hash(AdaptationConfig(workers=8))
    assert config_hash(config) != config_hash(AdaptationConfig(seed=1))
    assert config_hash(config) != config_hash(AdaptationConfig(alpha=0.3))
