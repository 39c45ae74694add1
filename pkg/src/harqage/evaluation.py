"""
Experiment harness: controllers, multi-seed simulation and parameter sweeps.

Every controller follows the :class:`Controller` protocol, so the same
rollout loop drives policy tables, the drift-plus-penalty controller, the
trained Q-network and the baseline.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from pydantic import ValidationError

from harqage.cmdp import DeterministicPolicy, SolvedPolicies, StateSpace, bisection_solve, enumerate_states
from harqage.config.models import EvalConfig, SolverConfig, SweepConfig, SystemConfig, TrainConfig
from harqage.config.settings import RunSettings
from harqage.dql import DqlController, QNetwork, train
from harqage.env import Action, StepOutcome, SystemState, can_retransmit, initial_state, step
from harqage.errors import (
    ConvergenceError,
    InfeasibleConstraintError,
    StateSpaceTooLargeError,
    TrainingDivergedError,
)
from harqage.lyapunov import LcdtController
from harqage.stats import batch_means_halfwidth, running_mean, t_halfwidth

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    'param_name',
    'param_value',
    'controller',
    'tau_bar',
    'tau_ci',
    'delta_bar',
    'delta_ci',
    'feasible',
    'seeds',
    'horizon',
    'row_type',
    'seed',
    'status',
)


class Controller(Protocol):
    name: str

    def reset(self) -> None: ...

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action: ...

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None: ...


ControllerFactory = Callable[[], Controller]


class PolicyTableController:
    """Looks the action up in a solved policy table."""

    def __init__(self, space: StateSpace, policy: DeterministicPolicy, name: str = 'cmdp'):
        self.space = space
        self.policy = policy
        self.name = name

    def reset(self) -> None:
        pass

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action:
        return self.policy.action_at(self.space.index_of(state))

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None:
        pass


class IdleController:
    name = 'idle'

    def reset(self) -> None:
        pass

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action:
        return Action.idle()

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None:
        pass


class BaselineController:
    """
    Threshold policy with persistent HARQ retransmissions.

    An undecoded packet is retransmitted in consecutive slots until it is
    decoded or reaches ``max_attempts``. Otherwise, once the running time
    average of the AoI observed so far reaches the limit, a fresh packet of the
    source with the largest AoI is sent (ties broken uniformly at random); else
    the transmitter stays idle. The first slot is always idle.
    """

    name = 'baseline'

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.pending: int | None = None
        self.aoi_total = 0.0
        self.slots = 0

    def reset(self) -> None:
        self.pending = None
        self.aoi_total = 0.0
        self.slots = 0

    @property
    def running_delta_bar(self) -> float:
        return self.aoi_total / self.slots if self.slots else 0.0

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action:
        if self.pending is not None:
            if can_retransmit(state[self.pending], self.cfg):
                return Action.retransmit(self.pending)
            self.pending = None
        if self.slots and self.running_delta_bar >= self.cfg.aoi_limit:
            ages = [source.aoi for source in state]
            oldest = max(ages)
            ties = [k for k, age in enumerate(ages) if age == oldest]
            return Action.fresh(ties[int(rng.integers(len(ties)))] if len(ties) > 1 else ties[0])
        return Action.idle()

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None:
        self.aoi_total += outcome.aoi_cost
        self.slots += 1
        if action.is_transmission and not outcome.decoded:
            self.pending = action.source
        else:
            self.pending = None


def make_factory(
    name: str,
    cfg: SystemConfig,
    *,
    space: StateSpace | None = None,
    policy: DeterministicPolicy | None = None,
    network: QNetwork | None = None,
    queue_scale: float | None = None,
) -> ControllerFactory:
    """
    Picklable zero-argument constructor for a named controller.

    ``cmdp`` and ``lower_bound`` need ``space`` and ``policy``; ``dql`` needs ``network``.
    """
    if name in ('cmdp', 'lower_bound'):
        if space is None or policy is None:
            raise ValueError(f"Controller '{name}' needs a state space and a policy table")
        return partial(PolicyTableController, space, policy, name)
    if name == 'dql':
        if network is None:
            raise ValueError("Controller 'dql' needs a trained network")
        return partial(DqlController, network, cfg, queue_scale)
    if name == 'lcdt':
        return partial(LcdtController, cfg)
    if name == 'baseline':
        return partial(BaselineController, cfg)
    if name == 'idle':
        return IdleController
    raise ValueError(f"Unknown controller '{name}'")


@dataclass(frozen=True)
class SeedRun:
    """One rollout: per-slot transmissions and next-slot average AoI."""

    seed: int
    transmissions: np.ndarray
    avg_aoi: np.ndarray
    burn_in: int

    @property
    def running_tau_bar(self) -> np.ndarray:
        return running_mean(self.transmissions)

    @property
    def running_delta_bar(self) -> np.ndarray:
        return running_mean(self.avg_aoi)

    @property
    def tau_bar(self) -> float:
        return float(self.transmissions[self.burn_in :].mean())

    @property
    def delta_bar(self) -> float:
        return float(self.avg_aoi[self.burn_in :].mean())

    @property
    def tau_ci(self) -> float:
        return batch_means_halfwidth(self.transmissions[self.burn_in :])

    @property
    def delta_ci(self) -> float:
        return batch_means_halfwidth(self.avg_aoi[self.burn_in :])


@dataclass(frozen=True)
class RunMetrics:
    controller: str
    config: SystemConfig
    horizon: int
    runs: tuple[SeedRun, ...]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(run.seed for run in self.runs)

    @property
    def tau_bar(self) -> float:
        return float(np.mean([run.tau_bar for run in self.runs]))

    @property
    def delta_bar(self) -> float:
        return float(np.mean([run.delta_bar for run in self.runs]))

    @property
    def tau_ci(self) -> float:
        if len(self.runs) == 1:
            return self.runs[0].tau_ci
        return t_halfwidth([run.tau_bar for run in self.runs])

    @property
    def delta_ci(self) -> float:
        if len(self.runs) == 1:
            return self.runs[0].delta_ci
        return t_halfwidth([run.delta_bar for run in self.runs])

    @property
    def feasible(self) -> bool:
        slack = 0.0 if math.isnan(self.delta_ci) else self.delta_ci
        return self.delta_bar <= self.config.aoi_limit + slack


def simulate_seed(
    factory: ControllerFactory,
    cfg: SystemConfig,
    horizon: int,
    seed: int,
    burn_in_fraction: float = 0.1,
) -> SeedRun:
    """Roll one controller out from the all-zero state with its own generator."""
    rng = np.random.default_rng([cfg.rng_seed, seed])
    controller = factory()
    controller.reset()
    state = initial_state(cfg)
    transmissions = np.empty(horizon)
    aoi = np.empty(horizon)
    for t in range(horizon):
        action = controller.decide(state, rng)
        outcome = step(state, action, rng, cfg)
        controller.observe(state, action, outcome)
        transmissions[t] = outcome.cost
        aoi[t] = outcome.aoi_cost
        state = outcome.next_state
    return SeedRun(seed, transmissions, aoi, int(horizon * burn_in_fraction))


def simulate(
    factory: ControllerFactory,
    cfg: SystemConfig,
    horizon: int,
    seeds: Sequence[int],
    burn_in_fraction: float = 0.1,
    threads: int = 1,
) -> RunMetrics:
    """
    Independent rollouts, one per seed, aggregated with 95% confidence intervals.

    With ``threads > 1`` seeds run in a process pool; results are ordered by
    seed, so the output does not depend on the worker count.
    """
    if horizon < 1:
        raise ValueError(f'horizon must be at least 1, got {horizon}')
    if not seeds:
        raise ValueError('At least one seed is required')
    worker = partial(simulate_seed, factory, cfg, horizon, burn_in_fraction=burn_in_fraction)
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
            runs = tuple(pool.map(worker, seeds))
    else:
        runs = tuple(worker(seed) for seed in seeds)
    metrics = RunMetrics(getattr(factory(), 'name', 'controller'), cfg, horizon, runs)
    logger.info(
        '%s over %d seeds: tau_bar=%.5f +- %.5f, delta_bar=%.4f +- %.4f',
        metrics.controller,
        len(runs),
        metrics.tau_bar,
        metrics.tau_ci,
        metrics.delta_bar,
        metrics.delta_ci,
    )
    return metrics


def measure_decision_latency(
    factories: Mapping[str, ControllerFactory],
    cfg: SystemConfig,
    slots: int,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Mean wall time of one ``decide`` call per controller, in seconds."""
    latency = {}
    for name, factory in factories.items():
        controller = factory()
        controller.reset()
        state = initial_state(cfg)
        elapsed = 0.0
        for _ in range(slots):
            started = time.perf_counter()
            action = controller.decide(state, rng)
            elapsed += time.perf_counter() - started
            outcome = step(state, action, rng, cfg)
            controller.observe(state, action, outcome)
            state = outcome.next_state
        latency[name] = elapsed / slots
        logger.debug('%s: %.3g s per decision', name, latency[name])
    return latency


@dataclass(frozen=True)
class SweepSpec:
    """A swept ``SystemConfig`` field with everything needed to evaluate each point."""

    parameter: str
    values: tuple[float, ...]
    controllers: tuple[str, ...]
    system: SystemConfig
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    linked: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        SweepConfig(
            sweep_parameter=self.parameter,
            sweep_values=self.values,
            sweep_controllers=self.controllers,
            sweep_linked=self.linked,
        )

    @classmethod
    def from_settings(cls, settings: RunSettings) -> SweepSpec:
        sweep = settings.sweep()
        return cls(
            parameter=sweep.sweep_parameter,
            values=sweep.sweep_values,
            controllers=sweep.sweep_controllers,
            system=settings.system(),
            evaluation=settings.evaluation(),
            solver=settings.solver(),
            training=settings.train(),
            linked=sweep.sweep_linked,
        )

    def config_at(self, value: float) -> SystemConfig:
        changes: dict[str, Any] = {name: value for name in (self.parameter, *self.linked)}
        return self.system.with_updates(**changes)


@dataclass(frozen=True)
class SweepRow:
    row_type: str
    param_name: str
    param_value: float
    controller: str
    tau_bar: float
    tau_ci: float
    delta_bar: float
    delta_ci: float
    feasible: bool
    seeds: int
    horizon: int
    seed: int | None = None
    status: str = 'ok'

    def as_record(self) -> list[str]:
        return [
            self.param_name,
            repr(float(self.param_value)),
            self.controller,
            repr(self.tau_bar),
            repr(self.tau_ci),
            repr(self.delta_bar),
            repr(self.delta_ci),
            str(self.feasible).lower(),
            str(self.seeds),
            str(self.horizon),
            self.row_type,
            '' if self.seed is None else str(self.seed),
            self.status,
        ]


def metric_rows(spec: SweepSpec, value: float, metrics: RunMetrics) -> list[SweepRow]:
    rows = [
        SweepRow(
            row_type='seed',
            param_name=spec.parameter,
            param_value=value,
            controller=metrics.controller,
            tau_bar=run.tau_bar,
            tau_ci=run.tau_ci,
            delta_bar=run.delta_bar,
            delta_ci=run.delta_ci,
            feasible=run.delta_bar <= metrics.config.aoi_limit + (0.0 if math.isnan(run.delta_ci) else run.delta_ci),
            seeds=1,
            horizon=metrics.horizon,
            seed=run.seed,
        )
        for run in metrics.runs
    ]
    rows.append(
        SweepRow(
            row_type='aggregate',
            param_name=spec.parameter,
            param_value=value,
            controller=metrics.controller,
            tau_bar=metrics.tau_bar,
            tau_ci=metrics.tau_ci,
            delta_bar=metrics.delta_bar,
            delta_ci=metrics.delta_ci,
            feasible=metrics.feasible,
            seeds=len(metrics.runs),
            horizon=metrics.horizon,
        )
    )
    return rows


def _flagged_row(spec: SweepSpec, value: float, controller: str, status: str) -> SweepRow:
    nan = float('nan')
    return SweepRow(
        row_type='aggregate',
        param_name=spec.parameter,
        param_value=value,
        controller=controller,
        tau_bar=nan,
        tau_ci=nan,
        delta_bar=nan,
        delta_ci=nan,
        feasible=False,
        seeds=len(spec.evaluation.seeds),
        horizon=spec.evaluation.horizon,
        status=status,
    )


def _solver_status(error: Exception) -> str:
    if isinstance(error, InfeasibleConstraintError):
        return f'infeasible: best delta_bar {error.best_delta_bar:.4f} > aoi_limit {error.aoi_limit:g}'
    if isinstance(error, StateSpaceTooLargeError):
        return f'state_space_too_large: {error.reached} > {error.cap}'
    if isinstance(error, ConvergenceError):
        return f'no_convergence: residual {error.residual:.3e}'
    return f'diverged: {error}'


def run_sweep(spec: SweepSpec) -> list[SweepRow]:
    """
    Evaluate every controller at every value of the swept parameter.

    Solver failures and invalid parameter values become flagged aggregate rows.
    The result is deterministic given the seeds.
    """
    rows: list[SweepRow] = []
    evaluation = spec.evaluation
    for value in spec.values:
        try:
            cfg = spec.config_at(value)
        except ValidationError as error:
            message = error.errors()[0]['msg']
            rows.extend(_flagged_row(spec, value, name, f'invalid: {message}') for name in spec.controllers)
            continue
        logger.info('Sweep point %s=%g', spec.parameter, value)
        solved: SolvedPolicies | Exception | None = None
        space: StateSpace | None = None
        for name in spec.controllers:
            try:
                if name in ('cmdp', 'lower_bound'):
                    if solved is None:
                        try:
                            space = enumerate_states(cfg, spec.solver.max_states)
                            solved = bisection_solve(cfg, spec.solver, space)
                        except (InfeasibleConstraintError, StateSpaceTooLargeError, ConvergenceError) as error:
                            solved = error
                    if isinstance(solved, Exception):
                        raise solved
                    policy = solved.feasible if name == 'cmdp' else solved.lower_bound
                    factory = make_factory(name, cfg, space=space, policy=policy)
                elif name == 'dql':
                    result = train(cfg, spec.training, np.random.default_rng(spec.training.train_seed))
                    factory = make_factory(name, cfg, network=result.network, queue_scale=result.queue_scale)
                else:
                    factory = make_factory(name, cfg)
            except (InfeasibleConstraintError, StateSpaceTooLargeError, ConvergenceError, TrainingDivergedError) as error:
                logger.warning('%s at %s=%g: %s', name, spec.parameter, value, error)
                rows.append(_flagged_row(spec, value, name, _solver_status(error)))
                continue
            metrics = simulate(
                factory, cfg, evaluation.horizon, evaluation.seeds, evaluation.burn_in_fraction, evaluation.threads
            )
            rows.extend(metric_rows(spec, value, metrics))
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], path: str | Path) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(row.as_record())


# Desk-scale experiment presets, flat keys as in a configuration file.
_DESK_SYSTEM: dict[str, Any] = {
    'num_random_sources': 1,
    'num_gaw_sources': 1,
    'arrival_probs': 0.7,
    'first_error_prob': 0.4,
    'harq_gain': 0.4,
    'max_attempts': 3,
    'aoi_cap': 10,
    'aoi_limit': 4.0,
    'dpp_weight': 30.0,
}

PRESETS: dict[str, dict[str, Any]] = {
    'error-prob': {
        **_DESK_SYSTEM,
        'aoi_cap': 12,
        'sweep_parameter': 'first_error_prob',
        'sweep_values': (0.4, 0.6),
        'sweep_controllers': ('cmdp', 'lower_bound'),
    },
    'arrival-rate': {
        **_DESK_SYSTEM,
        'aoi_cap': 12,
        'sweep_parameter': 'arrival_probs',
        'sweep_values': (0.5, 0.2),
        'sweep_controllers': ('cmdp', 'lower_bound'),
    },
    'penalty-weight': {
        **_DESK_SYSTEM,
        'aoi_cap': 18,
        'max_attempts': 5,
        'sweep_parameter': 'dpp_weight',
        'sweep_values': (2.0, 10.0, 20.0, 30.0, 100.0),
        'sweep_controllers': ('lcdt',),
    },
    'learned-weight': {
        **_DESK_SYSTEM,
        'sweep_parameter': 'dpp_weight',
        'sweep_values': (10.0, 30.0, 100.0),
        'sweep_controllers': ('dql',),
    },
    'aoi-limit': {
        **_DESK_SYSTEM,
        'sweep_parameter': 'aoi_limit',
        'sweep_values': (3.0, 4.0, 5.0, 6.0, 7.0, 8.0),
        'sweep_controllers': ('lower_bound', 'cmdp', 'lcdt', 'dql', 'baseline'),
    },
    'harq-budget': {
        **_DESK_SYSTEM,
        'first_error_prob': 0.6,
        'harq_gain': 0.3,
        'sweep_parameter': 'max_attempts',
        'sweep_values': (1, 2, 3, 4, 5),
        'sweep_controllers': ('lcdt',),
    },
    'source-count': {
        **_DESK_SYSTEM,
        'aoi_cap': 18,
        'first_error_prob': 0.6,
        'max_attempts': 5,
        'aoi_limit': 10.0,
        'sweep_parameter': 'num_random_sources',
        'sweep_linked': ('num_gaw_sources',),
        'sweep_values': (1, 2, 3),
        'sweep_controllers': ('lcdt',),
    },
}
