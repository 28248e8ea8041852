"""Flat ``key = value`` text format shared by config files and checkpoint
metadata.  Lines starting with ``#`` (and blank lines) are ignored; values
are kept as strings, with typed accessors for the common cases.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}: line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def render_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def get_int(kv: dict[str, str], key: str) -> int:
    try:
        return int(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {kv[key]!r}") from None


def get_float(kv: dict[str, str], key: str) -> float:
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {kv[key]!r}") from None


def get_ints(kv: dict[str, str], key: str) -> tuple[int, ...]:
    raw = kv[key].strip()
    if not raw:
        return ()
    try:
        return tuple(int(v.strip()) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {kv[key]!r}") from None


def get_floats(kv: dict[str, str], key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v.strip()) for v in kv[key].split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {kv[key]!r}") from None
