"""Helpers for reading and writing labeldenoise configuration files."""
from __future__ import annotations

import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

import yaml

from .errors import ConfigError
from .models import AdaptationConfig, DomainSpec
from .utils import sha256_text

SEED_ENV_VAR = "LD_SFSS_SEED"
_CONFIG_HEADER = "# labeldenoise adaptation config\n"
_SPEC_HEADER = "# labeldenoise synthetic domain spec\n"

_Record = TypeVar("_Record", AdaptationConfig, DomainSpec)


def _read_mapping(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config file '{path}' does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config file '{path}' is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must contain a mapping")
    return data


def _coerce(record_type: Type[_Record], data: Mapping[str, Any]) -> _Record:
    known = {item.name: item for item in fields(record_type)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown {record_type.__name__} keys: {', '.join(unknown)}")
    try:
        return record_type(**dict(data))
    except TypeError as exc:
        raise ConfigError(f"Incomplete {record_type.__name__}: {exc}") from exc


def config_from_mapping(data: Mapping[str, Any]) -> AdaptationConfig:
    config = _coerce(AdaptationConfig, data)
    defaults = AdaptationConfig()
    # YAML gives ints for "1" where floats are expected; normalise against the defaults' types.
    for item in fields(AdaptationConfig):
        value = getattr(config, item.name)
        expected = type(getattr(defaults, item.name))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            setattr(config, item.name, float(value))
        elif not isinstance(value, expected):
            raise ConfigError(f"'{item.name}' must be {expected.__name__}, got {value!r}")
    return config


def load_config(path: Path | None, overrides: Mapping[str, Any] | None = None) -> AdaptationConfig:
    """Resolve the effective config: flag overrides > ``LD_SFSS_SEED`` > file > defaults."""
    data: Dict[str, Any] = _read_mapping(path) if path is not None else {}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_seed}'") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return config_from_mapping(data).validate()


def save_config(path: Path, config: AdaptationConfig) -> None:
    """Persist the config as a YAML document."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{_CONFIG_HEADER}{yaml.safe_dump(asdict(config), sort_keys=False)}")


# Execution-only fields; they never change what a run computes.
_UNHASHED_FIELDS = ("workers",)


def config_hash(config: AdaptationConfig) -> str:
    data = {key: value for key, value in asdict(config).items() if key not in _UNHASHED_FIELDS}
    return sha256_text(yaml.safe_dump(data, sort_keys=True))


def domain_spec_from_mapping(data: Mapping[str, Any]) -> DomainSpec:
    spec = _coerce(DomainSpec, data)
    spec.class_frequencies = [float(value) for value in spec.class_frequencies]
    spec.base_colors = [[float(channel) for channel in color] for color in spec.base_colors]
    spec.texture_amplitudes = [float(value) for value in spec.texture_amplitudes]
    spec.texture_periods = [float(value) for value in spec.texture_periods]
    return spec.validate()


def load_domain_spec(path: Path) -> DomainSpec:
    return domain_spec_from_mapping(_read_mapping(path))


def save_domain_spec(path: Path, spec: DomainSpec) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{_SPEC_HEADER}{yaml.safe_dump(asdict(spec), sort_keys=False)}")


def domain_spec_hash(spec: DomainSpec) -> str:
    return sha256_text(yaml.safe_dump(asdict(spec), sort_keys=True))
