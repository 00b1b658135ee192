"""Flat ``key=value`` text files for the frozen config dataclasses.

One entry per line, ``#`` starts a comment. Keys must match dataclass field
names exactly; anything else is rejected so that typos cannot silently fall
back to defaults.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Type, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(values: dict[str, Any]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return raw


def dataclass_to_kv(obj: Any) -> str:
    return format_kv(dataclasses.asdict(obj))


def dataclass_from_kv(cls: Type[T], text: str, base: T | None = None) -> T:
    """Build ``cls`` from ``key=value`` text, starting from ``base`` or defaults."""
    base = base if base is not None else cls()
    values = parse_kv(text)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, getattr(base, k), k) for k, v in values.items()}
    return dataclasses.replace(base, **kwargs)


def load_dataclass(cls: Type[T], path: str | Path) -> T:
    return dataclass_from_kv(cls, Path(path).read_text())


def save_dataclass(obj: Any, path: str | Path) -> None:
    Path(path).write_text(dataclass_to_kv(obj))
