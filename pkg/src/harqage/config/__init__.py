"""
Configuration layer.

Settings are assembled from ordered sources (YAML files, flat ``key = value``
files, ``HARQAGE_*`` environment variables, in-memory overrides), templates
are resolved, and typed pydantic views are validated from the flat key space.

Usage example:
    from harqage.config import load_settings

    settings = load_settings(['desk.yaml'], overrides={'aoi_limit': 5})
    system = settings.system()
"""

from harqage.config.merge import flatten_sections, overlay
from harqage.config.models import (
    CONTROLLER_NAMES,
    EvalConfig,
    SolverConfig,
    SweepConfig,
    SystemConfig,
    TrainConfig,
    valid_keys,
)
from harqage.config.settings import RunSettings, load_settings
from harqage.config.sources import (
    ConfigSource,
    EnvSource,
    KeyValueFileSource,
    MappingSource,
    YamlFileSource,
    source_for_path,
)

__all__ = [
    'CONTROLLER_NAMES',
    'ConfigSource',
    'EnvSource',
    'EvalConfig',
    'KeyValueFileSource',
    'MappingSource',
    'RunSettings',
    'SolverConfig',
    'SweepConfig',
    'SystemConfig',
    'TrainConfig',
    'YamlFileSource',
    'flatten_sections',
    'load_settings',
    'overlay',
    'source_for_path',
    'valid_keys',
]
