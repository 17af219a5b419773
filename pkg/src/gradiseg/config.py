"""Flat key = value run configuration files mapping onto TrainSchedule fields.

Lines are `key = value` (or `key=value`); blank lines and #-comments are
ignored. Values are parsed as bool/int/float/string by field type.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .trainer import TrainSchedule


def _parse_value(raw: str, kind):
    raw = raw.strip().strip('"').strip("'")
    if kind is bool or raw.lower() in ("true", "false"):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse {raw!r} as bool")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(float(x) for x in raw.split(","))
    return raw


def load_train_config(path, overrides: dict | None = None) -> TrainSchedule:
    """TrainSchedule from a key=value file (path may be None for defaults)."""
    known = {f.name: f for f in fields(TrainSchedule)}
    kinds = {}
    for name, f in known.items():
        default = f.default
        kinds[name] = type(default) if default is not None else (
            int if name in ("densify_end", "igd_end", "knn_switch") else float)

    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(raw, kinds[key])
    if overrides:
        values.update(overrides)
    return TrainSchedule(**values)
