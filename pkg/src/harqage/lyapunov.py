"""
Low-complexity dynamic transmission: a drift-plus-penalty controller.

The average-AoI constraint is turned into a virtual queue ``Q``. Every slot
the controller picks the feasible action minimising the closed-form upper
bound ``W_t`` of the drift plus ``V`` times the transmission cost.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from harqage.config.models import SystemConfig
from harqage.env import (
    Action,
    ActionKind,
    StepOutcome,
    SystemState,
    can_retransmit,
    decode_prob,
    feasible_actions,
    initial_state,
    is_feasible,
    step,
)
from harqage.errors import DomainError, InfeasibleActionError
from harqage.stats import running_mean

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('slot', 'action_code', 'decoded', 'avg_aoi', 'running_tau_bar', 'running_delta_bar', 'Q')


@dataclass(frozen=True)
class NetworkState:
    """System state together with the virtual queue backlog."""

    system: SystemState
    queue: float = 0.0

    def __post_init__(self) -> None:
        if self.queue < 0.0:
            raise DomainError(f'Virtual queue must be non-negative, got {self.queue}')


def virtual_queue_update(queue: float, next_avg_aoi: float, aoi_limit: float) -> float:
    """``max(Q - aoi_limit + next_avg_aoi, 0)``."""
    return max(queue - aoi_limit + next_avg_aoi, 0.0)


@dataclass(frozen=True)
class MomentTerms:
    """
    Per-source moments of the next AoI for given transmission probabilities.

    ``mean[k] = E{delta_k'}``, ``second[k] = E{delta_k'^2}`` and
    ``tilde[k] = min(delta_k + 1, cap)``; arrays may carry a leading batch axis.
    """

    mean: np.ndarray
    second: np.ndarray
    tilde: np.ndarray

    @property
    def num_sources(self) -> int:
        return int(self.tilde.shape[-1])

    def expected_avg(self) -> np.ndarray:
        return self.mean.sum(axis=-1) / self.num_sources

    def expected_avg_sq(self) -> np.ndarray:
        """
        Second moment of the average AoI.

        Cross terms keep only the first-order deviations from ``tilde``; the
        product of two deviations carries ``u_k * u_k'`` and vanishes because at
        most one source transmits per slot.
        """
        tilde = np.broadcast_to(self.tilde, self.mean.shape)
        deviation = self.mean - tilde
        total = tilde.sum(axis=-1, keepdims=True)
        pairs = 2.0 * (deviation * (total - tilde)).sum(axis=-1) + total[..., 0] ** 2 - (tilde**2).sum(axis=-1)
        return (self.second.sum(axis=-1) + pairs) / self.num_sources**2


def _aged(system: SystemState, cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """``(tilde_fresh, tilde_proc, tilde_aoi, f(x+1) or 0, f(1))`` per source."""
    cap = cfg.aoi_cap
    fresh = np.array([min(s.fresh_age + 1, cap) for s in system], dtype=np.float64)
    proc = np.array([min(s.proc_age + 1, cap) for s in system], dtype=np.float64)
    aoi = np.array([min(s.aoi + 1, cap) for s in system], dtype=np.float64)
    retx_success = np.array(
        [decode_prob(s.attempts + 1, cfg) if can_retransmit(s, cfg) else 0.0 for s in system], dtype=np.float64
    )
    return fresh, proc, aoi, retx_success, decode_prob(1, cfg)


def moment_terms(
    system: SystemState,
    fresh_probs: np.ndarray,
    retx_probs: np.ndarray,
    cfg: SystemConfig,
) -> MomentTerms:
    """
    Next-AoI moments for indicator expectations ``E{u_k}`` and ``E{r_k}``.

    Both probability arrays have shape ``(K,)`` or ``(A, K)``; a deterministic
    action is the 0/1 special case.
    """
    fresh, proc, aoi, retx_success, first_success = _aged(system, cfg)
    w_fresh = np.asarray(fresh_probs, dtype=np.float64) * first_success
    w_proc = np.asarray(retx_probs, dtype=np.float64) * retx_success
    mean = aoi + w_fresh * (fresh - aoi) + w_proc * (proc - aoi)
    second = aoi**2 + w_fresh * (fresh**2 - aoi**2) + w_proc * (proc**2 - aoi**2)
    return MomentTerms(mean=mean, second=second, tilde=aoi)


def indicators(actions: Sequence[Action], num_sources: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 fresh and retransmit indicator matrices, shape ``(len(actions), K)``."""
    fresh = np.zeros((len(actions), num_sources))
    retx = np.zeros((len(actions), num_sources))
    for row, action in enumerate(actions):
        if action.kind is ActionKind.FRESH:
            fresh[row, action.source] = 1.0
        elif action.kind is ActionKind.RETRANSMIT:
            retx[row, action.source] = 1.0
    return fresh, retx


def _checked_terms(o: NetworkState, action: Action, cfg: SystemConfig) -> MomentTerms:
    if not is_feasible(o.system, action, cfg):
        raise InfeasibleActionError(f'{action} is not feasible in state {o.system}')
    fresh, retx = indicators([action], len(o.system))
    return moment_terms(o.system, fresh[0], retx[0], cfg)


def expected_next_aoi(o: NetworkState, action: Action, cfg: SystemConfig) -> float:
    """``E{delta_hat_(t+1) | o_t}`` under a deterministic action."""
    return float(_checked_terms(o, action, cfg).expected_avg())


def expected_next_aoi_sq(o: NetworkState, action: Action, cfg: SystemConfig) -> float:
    """``E{delta_hat_(t+1)^2 | o_t}`` under a deterministic action."""
    return float(_checked_terms(o, action, cfg).expected_avg_sq())


def dpp_objectives(o: NetworkState, actions: Sequence[Action], cfg: SystemConfig) -> np.ndarray:
    """
    ``W_t`` for every action in ``actions``, in one vectorised pass.

    The expectation over the action is dropped: ``u`` and ``r`` are the
    action's own indicators. Feasibility is not checked here.
    """
    num_sources = len(o.system)
    fresh, retx = indicators(actions, num_sources)
    terms = moment_terms(o.system, fresh, retx, cfg)
    limit = cfg.aoi_limit
    penalty = cfg.dpp_weight * (fresh + retx).sum(axis=1)
    tilde = terms.tilde
    deviation = terms.mean - tilde
    total = tilde.sum()
    pairs = 2.0 * (deviation * (total - tilde)).sum(axis=1) + total**2 - (tilde**2).sum()
    drift = (terms.second.sum(axis=1) + pairs + 2.0 * num_sources * o.queue * terms.mean.sum(axis=1)) / (
        2.0 * num_sources**2
    )
    return penalty + drift + 0.5 * (limit**2 - 2.0 * o.queue * limit)


def dpp_objective(o: NetworkState, action: Action, cfg: SystemConfig) -> float:
    if not is_feasible(o.system, action, cfg):
        raise InfeasibleActionError(f'{action} is not feasible in state {o.system}')
    return float(dpp_objectives(o, [action], cfg)[0])


def dpp_bound(o: NetworkState, action: Action, cfg: SystemConfig) -> float:
    """Drift-plus-penalty bound composed from the two expectation operations."""
    limit = cfg.aoi_limit
    return cfg.dpp_weight * float(action.is_transmission) + 0.5 * (
        limit**2
        + expected_next_aoi_sq(o, action, cfg)
        + 2.0 * o.queue * (expected_next_aoi(o, action, cfg) - limit)
    )


def select_action(o: NetworkState, cfg: SystemConfig) -> Action:
    """Feasible action with the smallest ``W_t``; the first in code order on ties."""
    candidates = feasible_actions(o.system, cfg)
    values = dpp_objectives(o, candidates, cfg)
    return candidates[int(np.argmin(values))]


class LcdtController:
    """
    Per-slot drift-plus-penalty controller with its own virtual queue.

    The queue starts at zero and is updated in :meth:`observe` with the
    average AoI of the state the action led to.
    """

    name = 'lcdt'

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.queue = 0.0

    def reset(self) -> None:
        self.queue = 0.0

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action:
        return select_action(NetworkState(state, self.queue), self.cfg)

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None:
        self.queue = virtual_queue_update(self.queue, outcome.aoi_cost, self.cfg.aoi_limit)


@dataclass(frozen=True)
class LcdtTrace:
    """Per-slot record of one controller run."""

    actions: np.ndarray
    decoded: np.ndarray
    avg_aoi: np.ndarray
    queue: np.ndarray

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[0])

    @property
    def transmissions(self) -> np.ndarray:
        return (self.actions != 0).astype(np.float64)

    @property
    def running_tau_bar(self) -> np.ndarray:
        return running_mean(self.transmissions)

    @property
    def running_delta_bar(self) -> np.ndarray:
        return running_mean(self.avg_aoi)

    def tau_bar(self, burn_in_fraction: float = 0.0) -> float:
        return float(self.transmissions[int(self.horizon * burn_in_fraction) :].mean())

    def delta_bar(self, burn_in_fraction: float = 0.0) -> float:
        return float(self.avg_aoi[int(self.horizon * burn_in_fraction) :].mean())

    def write_csv(self, path: str | Path) -> None:
        """Per-slot CSV with the columns of :data:`TRACE_COLUMNS`."""
        tau = self.running_tau_bar
        delta = self.running_delta_bar
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(TRACE_COLUMNS)
            for t in range(self.horizon):
                writer.writerow(
                    [
                        t + 1,
                        int(self.actions[t]),
                        int(self.decoded[t]),
                        repr(float(self.avg_aoi[t])),
                        repr(float(tau[t])),
                        repr(float(delta[t])),
                        repr(float(self.queue[t])),
                    ]
                )


def run_lcdt(cfg: SystemConfig, horizon: int, rng: np.random.Generator) -> LcdtTrace:
    """
    Run the controller for ``horizon`` slots from the all-zero state.

    Each slot: the state already holds the current arrivals, an action is
    selected, the decode outcome and next arrivals are sampled and ``Q`` is
    updated. ``avg_aoi[t]`` and ``queue[t]`` are taken after the update.
    """
    if horizon < 1:
        raise DomainError(f'horizon must be at least 1, got {horizon}')
    controller = LcdtController(cfg)
    state = initial_state(cfg)
    actions = np.empty(horizon, dtype=np.int64)
    decoded = np.empty(horizon, dtype=bool)
    aoi = np.empty(horizon)
    queue = np.empty(horizon)
    for t in range(horizon):
        action = controller.decide(state, rng)
        outcome = step(state, action, rng, cfg)
        controller.observe(state, action, outcome)
        actions[t] = action.code(cfg.num_sources)
        decoded[t] = outcome.decoded
        aoi[t] = outcome.aoi_cost
        queue[t] = controller.queue
        state = outcome.next_state
    trace = LcdtTrace(actions, decoded, aoi, queue)
    logger.info(
        'LC-DT V=%g: tau_bar=%.5f delta_bar=%.5f final Q=%.3f',
        cfg.dpp_weight,
        trace.tau_bar(),
        trace.delta_bar(),
        queue[-1],
    )
    return trace
