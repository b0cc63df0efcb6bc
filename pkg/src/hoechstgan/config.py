"""Layered run configuration.

Values resolve with rising precedence: dataclass defaults, then a YAML
config file, then HGAN_*-prefixed environment variables, then explicit
command-line flags. Environment values are parsed as YAML scalars so
numbers and booleans come through typed.
"""
from __future__ import annotations

import os
from pathlib import Path

import yaml

from .train import TrainConfig

ENV_PREFIX = "HGAN_"


def load_config_file(path) -> dict:
    """Reads a flat YAML mapping of training fields; empty file is fine."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    return data


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    # YAML leaves exponents like "2e-4" as strings; numbers should win.
    if isinstance(value, str):
        for convert in (int, float):
            try:
                return convert(value)
            except ValueError:
                pass
    return value


def env_overrides(environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Collects HGAN_FIELD_NAME variables as config fields."""
    environ = os.environ if environ is None else environ
    known = set(TrainConfig.__dataclass_fields__)
    out = {}
    for key, raw in environ.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):].lower()
        if name not in known:
            raise ValueError(f"environment variable {key} does not match any "
                             f"config field")
        out[name] = _parse_scalar(raw)
    return out


def merge_layers(*layers: dict) -> dict:
    """Later layers win; None values mean 'not set' and never override."""
    merged: dict = {}
    for layer in layers:
        for key, value in layer.items():
            if value is not None:
                merged[key] = value
    return merged


def resolve_train_config(config_file=None, cli_overrides: dict | None = None,
                         environ=None) -> TrainConfig:
    file_layer = load_config_file(config_file) if config_file else {}
    merged = merge_layers(file_layer, env_overrides(environ),
                          cli_overrides or {})
    return TrainConfig.from_dict(merged)
