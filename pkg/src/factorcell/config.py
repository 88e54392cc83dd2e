"""Flat ``key = value`` configuration files covering model, training and data settings."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    max_len: int = 0            # truncation cap in tokens, 0 = none
    min_count: int = 1
    max_vocab: int = 0          # 0 = unlimited
    context: str = ""           # "name:kind, ..." with kind categorical|numeric
    context_min_count: int = 1
    lenient: bool = False

    def kinds(self) -> dict:
        out = {}
        for item in filter(None, (s.strip() for s in self.context.split(","))):
            name, _, kind = item.partition(":")
            kind = kind.strip() or "categorical"
            if kind not in ("categorical", "numeric"):
                raise ConfigError(f"context variable {name!r}: unknown kind {kind!r}")
            out[name.strip()] = kind
        return out


SECTIONS = (ModelConfig, TrainConfig, DataConfig)


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def known_keys() -> dict:
    keys = {}
    for cls in SECTIONS:
        for f in fields(cls):
            keys[f.name] = cls
    return keys


def parse_pairs(pairs: Iterable[tuple], source: str = "config") -> dict:
    keys = known_keys()
    out = {}
    for lineno, key, value in pairs:
        if key not in keys:
            where = f"{source}:{lineno}" if lineno else source
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            pairs.append((lineno, key.strip(), value.strip()))
    return parse_pairs(pairs, str(path))


def parse_overrides(items: Optional[Iterable[str]]) -> dict:
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs.append((0, key.strip(), value.strip()))
    return parse_pairs(pairs, "override")


def build_configs(values: dict) -> tuple:
    """Split raw string values into (ModelConfig, TrainConfig, DataConfig)."""
    out = []
    for cls in SECTIONS:
        obj = cls()
        for f in fields(cls):
            if f.name in values:
                setattr(obj, f.name, _convert(values[f.name], getattr(obj, f.name), f.name))
        out.append(obj)
    return tuple(out)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig, data_cfg: DataConfig) -> str:
    lines = []
    for obj in (model_cfg, train_cfg, data_cfg):
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
