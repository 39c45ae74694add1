"""Typed configuration models.

All models share one flat key space: every field name is unique across
:class:`SystemConfig`, :class:`SolverConfig`, :class:`TrainConfig`,
:class:`EvalConfig` and :class:`SweepConfig`, so a flat ``key = value`` file
can carry all of them at once.
"""

from __future__ import annotations

import hashlib
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

DEFAULT_ARRIVAL_PROB = 0.7


class _FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    def fingerprint(self) -> str:
        """Stable short hash of the canonical JSON dump."""
        return hashlib.sha256(self.model_dump_json().encode('utf-8')).hexdigest()[:16]


class SystemConfig(_FrozenModel):
    """
    Model parameters of the multi-source HARQ status update system.

    Random-arrival sources come first (indices ``0..I-1``), generate-at-will
    sources follow (``I..K-1``).
    """

    num_random_sources: int = Field(default=1, ge=0)
    num_gaw_sources: int = Field(default=1, ge=0)
    arrival_probs: tuple[float, ...] = ()
    first_error_prob: float = Field(default=0.4, ge=0.0, le=1.0)
    harq_gain: float = Field(default=0.4, ge=0.0, le=1.0)
    max_attempts: int = Field(default=5, ge=1)
    aoi_cap: int = Field(default=18, ge=1)
    aoi_limit: float = Field(default=4.0, gt=0.0)
    dpp_weight: float = Field(default=30.0, gt=0.0)
    rng_seed: int = 0
    allow_empty_retransmit: bool = True

    @model_validator(mode='before')
    @classmethod
    def _broadcast_arrivals(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        count = data.get('num_random_sources', cls.model_fields['num_random_sources'].default)
        probs = data.get('arrival_probs')
        if probs is None or probs == () or probs == []:
            probs = DEFAULT_ARRIVAL_PROB if count else ()
        if isinstance(probs, int | float):
            probs = (float(probs),) * int(count)
        data['arrival_probs'] = tuple(probs)
        return data

    @model_validator(mode='after')
    def _check_invariants(self) -> SystemConfig:
        if self.num_sources < 1:
            raise ValueError('At least one source is required (num_random_sources + num_gaw_sources >= 1)')
        if len(self.arrival_probs) != self.num_random_sources:
            raise ValueError(
                f'arrival_probs has {len(self.arrival_probs)} entries for {self.num_random_sources} random sources'
            )
        for prob in self.arrival_probs:
            if not 0.0 < prob <= 1.0:
                raise ValueError(f'Arrival probability {prob} outside (0, 1]')
        if self.aoi_limit > self.aoi_cap:
            raise ValueError(f'aoi_limit {self.aoi_limit} exceeds aoi_cap {self.aoi_cap}; the constraint would be vacuous')
        return self

    @property
    def num_sources(self) -> int:
        return self.num_random_sources + self.num_gaw_sources

    def source_arrival_prob(self, source: int) -> float:
        """Arrival probability of ``source``; generate-at-will sources behave as ``1.0``."""
        if source < self.num_random_sources:
            return self.arrival_probs[source]
        return 1.0

    def with_updates(self, **changes: Any) -> SystemConfig:
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(changes)
        if 'num_random_sources' in changes and 'arrival_probs' not in changes and self.arrival_probs:
            data['arrival_probs'] = self.arrival_probs[0]
        return SystemConfig.model_validate(data)


class SolverConfig(_FrozenModel):
    """Parameters of the relative value iteration and the multiplier bisection."""

    beta_upper: float = Field(default=1.0, gt=0.0)
    beta_lower: float = Field(default=0.0, ge=0.0)
    bisection_tol: float = Field(default=0.005, gt=0.0)
    rvi_tol: float = Field(default=0.01, gt=0.0)
    max_rvi_iterations: int = Field(default=100_000, ge=1)
    max_states: int = Field(default=2_000_000, ge=1)
    exact_eval_threshold: int = Field(default=500_000, ge=0)
    direct_solve_threshold: int = Field(default=20_000, ge=0)
    power_iteration_tol: float = Field(default=1e-10, gt=0.0)
    max_power_iterations: int = Field(default=1_000_000, ge=1)
    mc_eval_horizon: int = Field(default=1_000_000, ge=1)
    mc_eval_seed: int = 0
    beta_expansion_limit: float = Field(default=float(2**20), gt=0.0)
    aperiodicity: float = Field(default=1.0, gt=0.0, le=1.0)

    @model_validator(mode='after')
    def _check_bracket(self) -> SolverConfig:
        if self.beta_lower >= self.beta_upper:
            raise ValueError(f'beta_lower {self.beta_lower} must be below beta_upper {self.beta_upper}')
        return self


class TrainConfig(_FrozenModel):
    """Deep Q-learning hyperparameters."""

    learning_rate: float = Field(default=1e-3, gt=0.0)
    discount: float = Field(default=0.99, gt=0.0, lt=1.0)
    batch_size: int = Field(default=32, ge=1)
    replay_capacity: int = Field(default=100_000, ge=1)
    steps_per_episode: int = Field(default=1000, ge=1)
    episodes: int = Field(default=300, ge=1)
    hidden_sizes: tuple[int, ...] = (64, 64)
    target_update: Literal['hard', 'soft'] = 'hard'
    target_sync_steps: int = Field(default=500, ge=1)
    target_soft_tau: float = Field(default=1.0 / 500.0, gt=0.0, le=1.0)
    epsilon_start: float = Field(default=1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(default=0.05, ge=0.0, le=1.0)
    epsilon_decay_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    q_feature_scale: float | None = Field(default=None, gt=0.0)
    reward_scale: float = Field(default=0.01, gt=0.0)
    grad_clip: float | None = Field(default=10.0, gt=0.0)
    warmup_steps: int = Field(default=1000, ge=0)
    train_every: int = Field(default=1, ge=1)
    train_seed: int = 0

    @model_validator(mode='after')
    def _check_sizes(self) -> TrainConfig:
        if self.batch_size > self.replay_capacity:
            raise ValueError(f'batch_size {self.batch_size} exceeds replay_capacity {self.replay_capacity}')
        if any(width < 1 for width in self.hidden_sizes):
            raise ValueError('hidden_sizes must be positive')
        return self

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode


class EvalConfig(_FrozenModel):
    """Monte-Carlo evaluation settings shared by simulations and sweeps."""

    horizon: int = Field(default=100_000, ge=1)
    seeds: tuple[int, ...] = tuple(range(10))
    burn_in_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode='before')
    @classmethod
    def _scalar_seed(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get('seeds'), int):
            data = {**data, 'seeds': (data['seeds'],)}
        return data


CONTROLLER_NAMES = ('cmdp', 'lower_bound', 'lcdt', 'dql', 'baseline', 'idle')


class SweepConfig(_FrozenModel):
    """Which parameter to sweep and which controllers to run at every point."""

    sweep_parameter: str = 'aoi_limit'
    sweep_values: tuple[float, ...] = ()
    sweep_controllers: tuple[str, ...] = ('lcdt',)
    sweep_linked: tuple[str, ...] = ()

    @model_validator(mode='before')
    @classmethod
    def _scalars_to_tuples(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for key in ('sweep_values', 'sweep_controllers', 'sweep_linked'):
            if isinstance(data.get(key), int | float | str):
                data[key] = (data[key],)
        return data

    @model_validator(mode='after')
    def _check_names(self) -> SweepConfig:
        if self.sweep_parameter not in SystemConfig.model_fields:
            raise ValueError(
                f"sweep_parameter '{self.sweep_parameter}' is not a SystemConfig field; "
                f'valid: {", ".join(SystemConfig.model_fields)}'
            )
        for name in self.sweep_linked:
            if name not in SystemConfig.model_fields:
                raise ValueError(f"sweep_linked entry '{name}' is not a SystemConfig field")
        unknown = [name for name in self.sweep_controllers if name not in CONTROLLER_NAMES]
        if unknown:
            raise ValueError(f'Unknown controller(s) {unknown}; valid: {", ".join(CONTROLLER_NAMES)}')
        return self


FLAT_MODELS: tuple[type[_FrozenModel], ...] = (SystemConfig, SolverConfig, TrainConfig, EvalConfig, SweepConfig)


def valid_keys() -> list[str]:
    """All keys accepted in a configuration file."""
    return [name for model in FLAT_MODELS for name in model.model_fields]
