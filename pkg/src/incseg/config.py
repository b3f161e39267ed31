"""Layered run configuration: defaults < file < command-line overrides.

Run configs are plain-text key-value documents (``key = value`` per
line).  The fully resolved form is persisted next to every run's
artifacts so any result can be reproduced from its output directory.
"""

from __future__ import annotations

from dataclasses import asdict, fields

from .errors import ConfigError, ParseError
from .trainer import TrainConfig

RUN_ONLY_DEFAULTS = {
    "step": 0,
    "train_manifest": "",
    "val_manifest": "",
    "schedule_file": "",
    "prev_checkpoint": "",
    "out": "run",
    "protocol": "overlap",
}


def default_config() -> dict:
    cfg = asdict(TrainConfig())
    cfg.update(RUN_ONLY_DEFAULTS)
    return cfg


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def render_kv(config: dict) -> str:
    return "\n".join(f"{k} = {config[k]}" for k in sorted(config)) + "\n"


def _coerce(key: str, value, default):
    if isinstance(value, type(default)) and not isinstance(value, str):
        return value
    text = str(value)
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    return text


def resolve_config(file_text: str | None = None, overrides: dict | None = None,
                   source: str = "<config>") -> dict:
    """Merge defaults, an optional config document, and explicit overrides."""
    resolved = default_config()
    layers = []
    if file_text is not None:
        layers.append(parse_kv_text(file_text, source))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in resolved:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value, resolved[key])
    return resolved


def train_config_from(run: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in run.items() if k in names}).validate()
