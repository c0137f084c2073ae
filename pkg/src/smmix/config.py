"""Flat ``key = value`` config files for TrainConfig."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .train import TrainConfig
from .vit import ModelConfig

_NONE = {"none", "null", ""}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def field_types() -> dict[str, str]:
    """Flat field name -> annotation string, model fields included."""
    out = {f.name: str(f.type) for f in dataclasses.fields(ModelConfig)}
    out.update({f.name: str(f.type) for f in dataclasses.fields(TrainConfig) if f.name != "model"})
    return out


def parse_value(key: str, text: str) -> Any:
    types = field_types()
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    if "None" in kind and text.lower() in _NONE:
        return None
    if kind.startswith("bool"):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path: str | Path) -> dict[str, Any]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, text)
    return values


def write_config_file(cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {format_value(v)}\n" for k, v in cfg.to_flat().items()))
    return path


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return TrainConfig.from_flat(values)
