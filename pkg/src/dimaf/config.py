"""Plain-text ``key = value`` configuration files.

Lines starting with ``#`` and blank lines are ignored. Values are coerced to
the type of the matching dataclass field; tuples are comma-separated.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), source=str(path))


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(_coerce(v.strip(), inner, key) for v in value.split(",") if v.strip())
        if origin is typing.Union or origin is types.UnionType:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if value.lower() in ("none", ""):
                return None
            return _coerce(value, args[0], key)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None


def build(cls, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from string ``values`` over ``base`` defaults."""
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(names)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    base = base if base is not None else cls()
    return dataclasses.replace(base, **kwargs)


def split_known(values: dict[str, str], *classes) -> list[dict[str, str]]:
    """Partition ``values`` among dataclasses; unknown keys raise ConfigError."""
    parts: list[dict[str, str]] = [{} for _ in classes]
    valid: list[str] = []
    for cls in classes:
        valid.extend(f.name for f in dataclasses.fields(cls))
    for key, value in values.items():
        for i, cls in enumerate(classes):
            if key in {f.name for f in dataclasses.fields(cls)}:
                parts[i][key] = value
                break
        else:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(set(valid)))}")
    return parts


def dump_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
