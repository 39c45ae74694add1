"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from typing import Any

from harqage.config.sources.base import ConfigSource, read_utf8

_TRUE = {'true', 'yes', 'on'}
_FALSE = {'false', 'no', 'off'}


def parse_scalar(text: str) -> Any:
    """Type a raw value as bool, int, float or string (quotes stripped)."""
    value = text.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in '\'"':
        return value[1:-1]
    lowered = value.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    if lowered in {'none', 'null'}:
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def parse_value(text: str) -> Any:
    """Parse a value; comma-separated values (optionally bracketed) become a list."""
    value = text.strip()
    if not value:
        return ''
    if value.startswith('[') and value.endswith(']'):
        value = value[1:-1]
        return [parse_scalar(item) for item in value.split(',') if item.strip()]
    if ',' in value and not (value[0] in '\'"' and value[-1] == value[0]):
        return [parse_scalar(item) for item in value.split(',') if item.strip()]
    return parse_scalar(value)


def parse_key_values(text: str, origin: str = '<string>') -> dict[str, Any]:
    """
    Parse ``key = value`` lines.

    ``#`` starts a comment, blank lines and ``[section]`` headers are skipped,
    a repeated key keeps its last value.

    :raises ValueError: If a line has no ``=``.
    """
    data: dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line or (line.startswith('[') and line.endswith(']') and '=' not in line):
            continue
        if '=' not in line:
            raise ValueError(f"{origin}:{number}: expected 'key = value', got {raw!r}")
        key, value = line.split('=', 1)
        data[key.strip()] = parse_value(value)
    return data


class KeyValueFileSource(ConfigSource):
    """Source for flat ``key = value`` files (``.conf``, ``.cfg``, flat ``.toml``)."""

    def __init__(self, file_path: str):
        self.file_path = file_path

    def load(self) -> dict[str, Any]:
        return parse_key_values(read_utf8(self.file_path), origin=self.file_path)

    def describe(self) -> str:
        return f'keyvalue:{self.file_path}'
