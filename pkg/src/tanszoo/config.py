"""Flat ``key = value`` config files and the flag > file > default merge."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Mapping

SEED_ENV = "TANSZOO_SEED"


class ConfigError(ValueError):
    pass


def _parse_value(raw: str) -> Any:
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("\"'")


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = _parse_value(raw)
    return out


def load_config(path: str | os.PathLike | None) -> dict[str, Any]:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(), str(path))


def default_seed(fallback: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def build(cls, file_values: Mapping[str, Any], flags: Mapping[str, Any],
          seed_field: str = "rng_seed"):
    """Instantiate dataclass ``cls`` from defaults, then file values, then flags.

    Keys that are not fields of ``cls`` are ignored so one file can hold
    settings for several stages. ``None`` flags count as unset.
    """
    names = {f.name: f for f in dataclasses.fields(cls)}
    values: dict[str, Any] = {}
    if seed_field in names and os.environ.get(SEED_ENV):
        values[seed_field] = default_seed()
    for src in (file_values, flags):
        for k, v in src.items():
            if k in names and v is not None:
                values[k] = v
    for k, v in list(values.items()):
        default = names[k].default
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            values[k] = float(v)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
