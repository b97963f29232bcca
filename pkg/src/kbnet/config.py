"""Flat key=value configuration files.

One ``key = value`` pair per line, ``#`` comments, blank lines ignored.
Keys mirror the NetConfig and TrainConfig field names; block-count tuples
are comma-separated (``encoder_blocks = 2,2,2,2``).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .net import NetConfig
from .training import TrainConfig


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target_type, key: str):
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is str:
            return value
        # remaining case: tuple[int, ...]
        return tuple(int(v.strip()) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}")


def _fill(cls, kv: dict[str, str], used: set[str]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in kv:
            base = f.type if isinstance(f.type, type) else None
            if base is None:
                base = {"int": int, "float": float, "str": str, "bool": bool}.get(
                    str(f.type).split("[")[0].split(".")[-1], tuple
                )
            kwargs[f.name] = _coerce(kv[f.name], base, f.name)
            used.add(f.name)
    return cls(**kwargs)


def load_configs(path) -> tuple[NetConfig, TrainConfig]:
    kv = parse_kv_text(Path(path).read_text())
    used: set[str] = set()
    net_cfg = _fill(NetConfig, kv, used)
    train_cfg = _fill(TrainConfig, kv, used)
    unknown = set(kv) - used
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return net_cfg, train_cfg
