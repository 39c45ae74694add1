from typing import Any

from harqage.config.sources.base import ConfigSource
from harqage.config.sources.keyvalue import parse_value


class MappingSource(ConfigSource):
    """Source wrapping an in-memory mapping (programmatic or ``--set`` overrides)."""

    def __init__(self, data: dict[str, Any], label: str = 'overrides'):
        self.data = dict(data)
        self.label = label

    @classmethod
    def from_assignments(cls, assignments: list[str]) -> 'MappingSource':
        """
        Build from ``KEY=VALUE`` strings.

        :raises ValueError: If an assignment has no ``=``.
        """
        data: dict[str, Any] = {}
        for item in assignments:
            if '=' not in item:
                raise ValueError(f"Override {item!r} must look like KEY=VALUE")
            key, value = item.split('=', 1)
            data[key.strip()] = parse_value(value)
        return cls(data, label='--set')

    def load(self) -> dict[str, Any]:
        return dict(self.data)

    def describe(self) -> str:
        return self.label
