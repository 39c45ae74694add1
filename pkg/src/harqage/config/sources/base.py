# src/harqage/config/sources/base.py

from abc import ABC, abstractmethod
from typing import Any


class ConfigSource(ABC):
    """Abstract base class for configuration sources."""

    @abstractmethod
    def load(self) -> dict[str, Any]:
        """
        Load configuration data from this source.

        Returns:
            A dict representing configuration values, possibly nested by section.
        """
        ...

    def describe(self) -> str:
        """Short human-readable origin, recorded in run manifests."""
        return type(self).__name__


def read_utf8(file_path: str) -> str:
    """Read a text file, naming the file in decoding errors."""
    with open(file_path, 'rb') as file:
        binary_content = file.read()
    try:
        return binary_content.decode('utf-8')
    except UnicodeDecodeError as e:
        raise UnicodeDecodeError(
            'utf-8',
            binary_content,
            e.start,
            e.end,
            f'Error decoding file {file_path}: {e}',
        ) from e
