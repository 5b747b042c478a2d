"""Plain ``key=value`` config files with precedence flags > file > defaults."""

from __future__ import annotations

import dataclasses
import logging
import typing
from typing import Dict, Mapping, Optional

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


def read_file(path) -> Dict[str, str]:
    try:
        with open(path) as fh:
            return parse_text(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def parse_overrides(items) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value, typ, key):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from None
    return value


def resolve(cls, file_values: Optional[Mapping[str, str]] = None, flag_values: Optional[Mapping] = None):
    """Build dataclass ``cls`` from defaults, then the file, then flags."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    merged: Dict[str, object] = {}
    for layer, values in (("file", file_values or {}), ("flag", flag_values or {})):
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown {layer} keys {unknown}")
        for k, v in values.items():
            if v is None:
                continue
            if k in merged:
                log.info("config %s: %s value %r overrides %r", k, layer, v, merged[k])
            merged[k] = _coerce(v, hints[k], k)
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def dump(obj) -> str:
    """Fully resolved ``key=value`` text, one key per line in field order."""
    lines = [f"{f.name}={_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"


def write(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump(obj))
