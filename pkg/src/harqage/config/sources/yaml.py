from typing import Any

import yaml

from harqage.config.sources.base import ConfigSource, read_utf8


class YamlFileSource(ConfigSource):
    """
    Source for loading a YAML file.

    Sections (``system:``, ``solver:``, ``train:``, ``eval:``, ``sweep:``) are
    allowed and flattened by :class:`~harqage.config.settings.RunSettings`.
    """

    def __init__(self, file_path: str):
        self.file_path = file_path

    def load(self) -> dict[str, Any]:
        config = yaml.safe_load(read_utf8(self.file_path))
        if config is None:
            return {}
        if not isinstance(config, dict):
            raise ValueError(f'Top level of {self.file_path} must be a mapping, got {type(config).__name__}')
        return config

    def describe(self) -> str:
        return f'yaml:{self.file_path}'
