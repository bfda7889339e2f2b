"""Flat ``key = value`` config files.

Blank lines and lines starting with ``#`` are ignored; keys may use ``-`` or
``_`` interchangeably.
"""

from __future__ import annotations

import os

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_kv(fh.read(), path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def render_kv(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_kv(values))
