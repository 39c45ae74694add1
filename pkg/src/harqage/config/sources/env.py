import os
from typing import Any

from dotenv import load_dotenv

from harqage.config.sources.base import ConfigSource
from harqage.config.sources.keyvalue import parse_value

ENV_PREFIX = 'HARQAGE_'


class EnvSource(ConfigSource):
    """
    Source for environment overrides.

    Every ``HARQAGE_<KEY>`` variable sets ``<key>``; e.g. ``HARQAGE_THREADS=4``
    sets ``threads``. An optional ``.env`` file is loaded first.
    """

    def __init__(self, dotenv_path: str | None = None, prefix: str = ENV_PREFIX):
        self.dotenv_path = dotenv_path
        self.prefix = prefix

    def load(self) -> dict[str, Any]:
        if self.dotenv_path:
            load_dotenv(self.dotenv_path)
        return {
            key[len(self.prefix) :].lower(): parse_value(value)
            for key, value in os.environ.items()
            if key.startswith(self.prefix) and len(key) > len(self.prefix) and value.strip()
        }

    def describe(self) -> str:
        return f'env:{self.prefix}*'
