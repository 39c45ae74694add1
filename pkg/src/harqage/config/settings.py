# src/harqage/config/settings.py

from __future__ import annotations

import logging
import os
import re
from typing import Any, TypeVar

from pydantic import BaseModel

from harqage.config.merge import flatten_sections, overlay
from harqage.config.models import (
    EvalConfig,
    SolverConfig,
    SweepConfig,
    SystemConfig,
    TrainConfig,
    valid_keys,
)
from harqage.config.sources.base import ConfigSource
from harqage.config.sources.env import EnvSource
from harqage.config.sources.mapping import MappingSource
from harqage.errors import ConfigKeyError

logger = logging.getLogger(__name__)

# Pattern for finding templates
TEMPLATE_PATTERN = re.compile(r'\${{\s*(\w+):(.+?)}}')

M = TypeVar('M', bound=BaseModel)


class RunSettings:
    """
    Settings container for one run.

    Stores aggregated data from multiple sources (:class:`ConfigSource`); later
    sources override earlier ones. Typed views are obtained with :meth:`to`.
    """

    def __init__(self, initial: dict[str, Any] | None = None):
        self._data: dict[str, Any] = flatten_sections(initial or {})
        self._sources: list[ConfigSource] = []

    def add_source(self, source: ConfigSource) -> RunSettings:
        """Load data from the source and merge it into the current object."""
        changed = overlay(self._data, flatten_sections(source.load()))
        logger.debug('%s set %s', source.describe(), ', '.join(changed) or 'nothing new')
        self._sources.append(source)
        return self

    @property
    def sources(self) -> list[str]:
        return [source.describe() for source in self._sources]

    def to_dict(self) -> dict[str, Any]:
        return dict(self._data)

    def __getitem__(self, key: str) -> Any:
        if key not in self._data:
            raise KeyError(f"Key '{key}' not found in the configuration")
        return self._data[key]

    def __contains__(self, key: object) -> bool:
        return key in self._data

    def check_keys(self) -> None:
        """
        Reject keys no configuration model accepts.

        :raises ConfigKeyError: Listing the unknown and the valid keys.
        """
        valid = valid_keys()
        unknown = [key for key in self._data if key not in valid]
        if unknown:
            raise ConfigKeyError(unknown, valid)

    def to(self, model: type[M]) -> M:
        """
        Validate the subset of keys belonging to ``model``.

        :param model: Pydantic model class whose field names select the keys.
        :return: Model instance.
        """
        subset = {key: value for key, value in self._data.items() if key in model.model_fields}
        return model.model_validate(subset)

    def system(self) -> SystemConfig:
        return self.to(SystemConfig)

    def solver(self) -> SolverConfig:
        return self.to(SolverConfig)

    def train(self) -> TrainConfig:
        return self.to(TrainConfig)

    def evaluation(self) -> EvalConfig:
        return self.to(EvalConfig)

    def sweep(self) -> SweepConfig:
        return self.to(SweepConfig)

    def resolve_templates(self) -> None:
        """
        Replace templates of the form ``${{ action:parameters }}`` in string values.

        Supported actions:

        - **env**: ``${{ env:VARIABLE_NAME[:DEFAULT_VALUE] }}`` inserts an environment variable.
        - **config**: ``${{ config:key }}`` inserts another value of this configuration.

        A value consisting of a single template takes the type of the inserted value;
        templates embedded in longer strings are substituted as text.

        :raises ValueError: Unknown action, or environment variable unset without default.
        :raises KeyError: ``config`` template naming a missing key.
        """
        self._data = {key: self._resolve_node(value) for key, value in self._data.items()}

    def _resolve_node(self, node: Any) -> Any:
        if isinstance(node, list):
            return [self._resolve_node(v) for v in node]
        if isinstance(node, str):
            new_value = self._resolve_value(node)
            while isinstance(new_value, str) and new_value != node:
                node = new_value
                new_value = self._resolve_value(node)
            return new_value
        return node

    def _resolve_value(self, value: str) -> Any:
        match = TEMPLATE_PATTERN.fullmatch(value.strip())
        if match:
            return self._dispatch(match.group(1), match.group(2))

        def replace_match(match: re.Match[str]) -> str:
            return str(self._dispatch(match.group(1), match.group(2)))

        return TEMPLATE_PATTERN.sub(replace_match, value)

    def _dispatch(self, action: str, params: str) -> Any:
        if action == 'env':
            return self._handle_env(params)
        if action == 'config':
            return self._handle_config(params)
        raise ValueError(f'Unknown action in template: {action}')

    def _handle_env(self, params: str) -> str:
        # Split only by first colon
        if ':' in params:
            var_name, default_value = params.split(':', 1)
            var_name = var_name.strip()
            default: str | None = default_value.strip()
        else:
            var_name = params.strip()
            default = None

        value = os.getenv(var_name, default)
        if value is None:
            raise ValueError(f'Environment variable {var_name} is not set and has no default value.')
        return value

    def _handle_config(self, params: str) -> Any:
        key = params.strip().rsplit('.', 1)[-1]
        if key not in self._data:
            raise KeyError(f"Key '{params.strip()}' not found in configuration.")
        return self._data[key]


def load_settings(
    paths: list[str] | None = None,
    overrides: dict[str, Any] | None = None,
    use_env: bool = True,
    base: dict[str, Any] | None = None,
) -> RunSettings:
    """
    Build settings from files, environment and overrides (in that precedence order).

    :param paths: Configuration files, YAML or flat ``key = value``; later files win.
    :param overrides: Final overrides, e.g. from command-line flags.
    :param use_env: Whether ``HARQAGE_*`` environment variables are applied.
    :param base: Lowest-precedence defaults, e.g. an experiment preset.
    :raises ConfigKeyError: If any source introduces an unknown key.
    """
    from harqage.config.sources import source_for_path

    settings = RunSettings(base)
    for path in paths or []:
        settings.add_source(source_for_path(path))
    if use_env:
        settings.add_source(EnvSource())
    if overrides:
        settings.add_source(MappingSource({k: v for k, v in overrides.items() if v is not None}))
    settings.resolve_templates()
    settings.check_keys()
    return settings
