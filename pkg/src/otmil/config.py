"""``key = value`` run configuration files.

Keys mirror the fields of :class:`TrainConfig` and :class:`SynthConfig`
plus a few run-level entries (``data``, ``out``, ``fold``).  Lines starting
with ``#`` are comments; unknown keys are rejected with their line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data_io import SynthConfig
from .train import TrainConfig

RUN_KEYS = {"data": str, "out": str, "fold": int}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict:
    types = {}
    for f in dataclasses.fields(cls):
        default = f.default
        if f.name == "max_patches":
            types[f.name] = "optional_int"
        elif isinstance(default, bool):
            types[f.name] = bool
        else:
            types[f.name] = type(default)
    return types


TRAIN_KEYS = _field_types(TrainConfig)
SYNTH_KEYS = _field_types(SynthConfig)


def _convert(kind, raw: str):
    if kind == "optional_int":
        return None if raw.lower() in ("none", "-", "") else int(raw)
    if kind is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def known_type(key: str):
    for table in (TRAIN_KEYS, SYNTH_KEYS, RUN_KEYS):
        if key in table:
            return table[key]
    return None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        kind = known_type(key)
        if kind is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(kind, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: str | None = None
    out: str | None = None
    fold: int | None = None

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        train_kw = {k: v for k, v in values.items() if k in TRAIN_KEYS}
        synth_kw = {k: v for k, v in values.items() if k in SYNTH_KEYS}
        try:
            return cls(
                train=TrainConfig(**train_kw),
                synth=SynthConfig(**synth_kw),
                data=values.get("data"),
                out=values.get("out"),
                fold=values.get("fold"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
