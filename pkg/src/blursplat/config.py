"""Flat ``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), str(path))


def _coerce(value: str, typ):
    if typ is bool:
        v = value.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int:
        try:
            return int(value)
        except ValueError:
            f = float(value)  # accept "6e3"
            if not f.is_integer():
                raise ValueError(f"not an integer: {value!r}") from None
            return int(f)
    if typ is float:
        return float(value)
    return value


def apply(obj, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields.

    Keys of nested dataclass fields are addressed as ``field.subfield``.
    Unknown keys raise ``KeyError``.
    """
    hints = typing.get_type_hints(type(obj))
    changes = {}
    nested: dict[str, dict[str, str]] = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {prefix + key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            typ = hints[head]
            if dataclasses.is_dataclass(typ):
                raise KeyError(f"config key {prefix + key!r} names a section, not a value")
            changes[head] = _coerce(value, typ)
    for head, sub in nested.items():
        changes[head] = apply(getattr(obj, head), sub, prefix + head + ".")
    return dataclasses.replace(obj, **changes)


def dump(obj, prefix: str = "") -> list[str]:
    """``key = value`` lines for every field, nested sections flattened."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            lines.extend(dump(v, prefix + f.name + "."))
        else:
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{prefix}{f.name} = {v}")
    return lines
