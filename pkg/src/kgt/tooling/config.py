"""Flat ``key = value`` configuration covering network and training settings."""

from __future__ import annotations

import dataclasses

from kgt.errors import ConfigParseError, UnknownKeyError, ValueParseError
from kgt.model import KGTNetConfig
from kgt.training import TrainConfig

_CASTS = {"int": int, "float": float, "str": str}


def _field_types() -> dict[str, str]:
    types = {}
    for cls in (KGTNetConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            types[f.name] = f.type
    return types


def _defaults() -> dict[str, object]:
    out = {}
    for obj in (KGTNetConfig(), TrainConfig()):
        out.update(dataclasses.asdict(obj))
    return out


FIELD_TYPES = _field_types()
DEFAULTS = _defaults()


class Config:
    """Typed view over the parsed key/value map; absent keys fall back to defaults."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        self.values.update(values or {})

    def __getitem__(self, key):
        return self.values[key]

    def get_int(self, key) -> int:
        return int(self.values[key])

    def get_float(self, key) -> float:
        return float(self.values[key])

    def get_str(self, key) -> str:
        return str(self.values[key])

    def net_config(self) -> KGTNetConfig:
        names = {f.name for f in dataclasses.fields(KGTNetConfig)}
        return KGTNetConfig(**{n: self.values[n] for n in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{n: self.values[n] for n in names})


def parse_config(text: str) -> Config:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in FIELD_TYPES:
            raise UnknownKeyError(f"unknown key {key!r}", lineno)
        try:
            values[key] = _CASTS[FIELD_TYPES[key]](val)
        except ValueError:
            raise ValueParseError(
                f"cannot read {val!r} as {FIELD_TYPES[key]} for {key!r}", lineno) from None
    return Config(values)


def render_defaults() -> str:
    return "".join(f"{k} = {v}\n" for k, v in DEFAULTS.items())
