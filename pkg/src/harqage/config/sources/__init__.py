from harqage.config.sources.base import ConfigSource
from harqage.config.sources.env import EnvSource
from harqage.config.sources.keyvalue import KeyValueFileSource
from harqage.config.sources.mapping import MappingSource
from harqage.config.sources.yaml import YamlFileSource

__all__ = ['ConfigSource', 'EnvSource', 'KeyValueFileSource', 'MappingSource', 'YamlFileSource', 'source_for_path']


def source_for_path(file_path: str) -> ConfigSource:
    """Pick the source class from the file extension (YAML or flat key=value)."""
    if file_path.endswith(('.yaml', '.yml')):
        return YamlFileSource(file_path)
    return KeyValueFileSource(file_path)
