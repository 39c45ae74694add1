"""
Multi-source HARQ status update dynamics.

A state holds, per source, the age of the fresh packet, the age of the
under-process packet kept for retransmission, the AoI at the receiver and the
number of transmission attempts of the under-process packet. A state already
reflects the arrivals of its own slot, so the successor computed by
:func:`advance_ages` and :func:`transition_kernel` includes the arrivals of the
next slot.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from harqage.config.models import SystemConfig
from harqage.errors import DomainError, InfeasibleActionError


class ActionKind(IntEnum):
    IDLE = 0
    FRESH = 1
    RETRANSMIT = 2


@dataclass(frozen=True, slots=True)
class Action:
    """
    Transmitter decision for one slot.

    ``source`` is the 0-based source index, ``-1`` for :attr:`ActionKind.IDLE`.
    Actions order as ``Idle < Fresh(0) < ... < Fresh(K-1) < Retx(0) < ... < Retx(K-1)``,
    which is also the order of their integer codes.
    """

    kind: ActionKind
    source: int = -1

    @classmethod
    def idle(cls) -> Action:
        return cls(ActionKind.IDLE)

    @classmethod
    def fresh(cls, source: int) -> Action:
        return cls(ActionKind.FRESH, source)

    @classmethod
    def retransmit(cls, source: int) -> Action:
        return cls(ActionKind.RETRANSMIT, source)

    @property
    def is_transmission(self) -> bool:
        return self.kind is not ActionKind.IDLE

    def code(self, num_sources: int) -> int:
        if self.kind is ActionKind.IDLE:
            return 0
        if self.kind is ActionKind.FRESH:
            return 1 + self.source
        return 1 + num_sources + self.source

    @classmethod
    def from_code(cls, code: int, num_sources: int) -> Action:
        if code == 0:
            return cls.idle()
        if 1 <= code <= num_sources:
            return cls.fresh(code - 1)
        if num_sources < code <= 2 * num_sources:
            return cls.retransmit(code - 1 - num_sources)
        raise DomainError(f'Action code {code} outside 0..{2 * num_sources}')

    def __str__(self) -> str:
        if self.kind is ActionKind.IDLE:
            return 'Idle'
        name = 'Fresh' if self.kind is ActionKind.FRESH else 'Retx'
        return f'{name}({self.source})'


def num_action_codes(num_sources: int) -> int:
    return 2 * num_sources + 1


def all_actions(num_sources: int) -> tuple[Action, ...]:
    """Every action in code order, feasible or not."""
    return tuple(Action.from_code(code, num_sources) for code in range(num_action_codes(num_sources)))


class SourceState(NamedTuple):
    fresh_age: int
    proc_age: int
    aoi: int
    attempts: int


SystemState = tuple[SourceState, ...]


@dataclass(frozen=True)
class StepOutcome:
    next_state: SystemState
    decoded: bool
    arrivals: tuple[bool, ...]
    cost: int
    aoi_cost: float


def initial_state(cfg: SystemConfig) -> SystemState:
    """All-zero state ``s_0``."""
    return tuple(SourceState(0, 0, 0, 0) for _ in range(cfg.num_sources))


def avg_aoi(state: SystemState) -> float:
    """Average AoI over all sources."""
    return sum(source.aoi for source in state) / len(state)


def decode_prob(attempts: int, cfg: SystemConfig) -> float:
    """
    Probability of decoding a packet after ``attempts`` transmissions, ``1 - p0 * eta**(x-1)``.

    :raises DomainError: If ``attempts`` is outside ``1..max_attempts``.
    """
    if not 1 <= attempts <= cfg.max_attempts:
        raise DomainError(f'attempts={attempts} outside 1..{cfg.max_attempts}')
    return 1.0 - cfg.first_error_prob * cfg.harq_gain ** (attempts - 1)


def can_retransmit(source: SourceState, cfg: SystemConfig) -> bool:
    if source.attempts + 1 > cfg.max_attempts:
        return False
    return cfg.allow_empty_retransmit or source.attempts >= 1


def feasible_actions(state: SystemState, cfg: SystemConfig) -> tuple[Action, ...]:
    """Feasible actions in code order; at most ``2K + 1`` of them."""
    num_sources = len(state)
    actions = [Action.idle()]
    actions.extend(Action.fresh(k) for k in range(num_sources))
    actions.extend(Action.retransmit(k) for k in range(num_sources) if can_retransmit(state[k], cfg))
    return tuple(actions)


def is_feasible(state: SystemState, action: Action, cfg: SystemConfig) -> bool:
    if action.kind is ActionKind.IDLE:
        return True
    if not 0 <= action.source < len(state):
        return False
    if action.kind is ActionKind.FRESH:
        return True
    return can_retransmit(state[action.source], cfg)


def _require_feasible(state: SystemState, action: Action, cfg: SystemConfig) -> None:
    if not is_feasible(state, action, cfg):
        raise InfeasibleActionError(f'{action} is not feasible in state {state}')


def next_source_state(
    source: SourceState,
    kind: ActionKind,
    decoded: bool,
    arrived: bool,
    is_random: bool,
    cap: int,
) -> SourceState:
    """One-slot update of a single source; ``kind`` is the action as seen by this source."""
    fresh = kind is ActionKind.FRESH
    retransmit = kind is ActionKind.RETRANSMIT

    if fresh:
        attempts = 1
    elif retransmit:
        attempts = source.attempts + 1
    else:
        attempts = source.attempts

    if fresh:
        proc_age = min(source.fresh_age + 1, cap)
    else:
        proc_age = min(source.proc_age + 1, cap)

    if fresh and decoded:
        aoi = min(source.fresh_age + 1, cap)
    elif retransmit and decoded:
        aoi = min(source.proc_age + 1, cap)
    else:
        aoi = min(source.aoi + 1, cap)

    if not is_random or arrived:
        fresh_age = 0
    else:
        fresh_age = min(source.fresh_age + 1, cap)

    return SourceState(fresh_age, proc_age, aoi, attempts)


def source_kind(action: Action, source: int) -> ActionKind:
    """The action restricted to one source."""
    if action.source == source:
        return action.kind
    return ActionKind.IDLE


def advance_ages(
    state: SystemState,
    action: Action,
    decoded: bool,
    arrivals: Sequence[bool],
    cfg: SystemConfig,
) -> SystemState:
    """
    Deterministic state update for a given decoding outcome and next-slot arrivals.

    :param arrivals: One flag per random-arrival source.
    :raises InfeasibleActionError: If ``action`` is not feasible in ``state``.
    :raises DomainError: If ``arrivals`` has the wrong length or an idle slot is marked decoded.
    """
    _require_feasible(state, action, cfg)
    if len(arrivals) != cfg.num_random_sources:
        raise DomainError(f'Expected {cfg.num_random_sources} arrival flags, got {len(arrivals)}')
    if decoded and not action.is_transmission:
        raise DomainError('An idle slot cannot decode a packet')
    num_random = cfg.num_random_sources
    return tuple(
        next_source_state(
            source,
            source_kind(action, k),
            decoded,
            bool(arrivals[k]) if k < num_random else True,
            k < num_random,
            cfg.aoi_cap,
        )
        for k, source in enumerate(state)
    )


def attempt_count_after(state: SystemState, action: Action) -> int:
    """Attempt count of the transmitted packet once this slot's attempt is included."""
    if action.kind is ActionKind.FRESH:
        return 1
    return state[action.source].attempts + 1


def step(state: SystemState, action: Action, rng: np.random.Generator, cfg: SystemConfig) -> StepOutcome:
    """
    Sample one slot: decoding outcome, then next-slot arrivals.

    :raises InfeasibleActionError: If ``action`` is not feasible in ``state``.
    """
    _require_feasible(state, action, cfg)
    decoded = False
    if action.is_transmission:
        decoded = bool(rng.random() < decode_prob(attempt_count_after(state, action), cfg))
    draws = rng.random(cfg.num_random_sources)
    arrivals = tuple(bool(draw < prob) for draw, prob in zip(draws, cfg.arrival_probs))
    next_state = advance_ages(state, action, decoded, arrivals, cfg)
    return StepOutcome(
        next_state=next_state,
        decoded=decoded,
        arrivals=arrivals,
        cost=int(action.is_transmission),
        aoi_cost=avg_aoi(next_state),
    )


def local_transitions(
    source: SourceState,
    kind: ActionKind,
    index: int,
    cfg: SystemConfig,
) -> list[tuple[SourceState, float]]:
    """
    Successor distribution of one source under its own part of the action.

    Generate-at-will sources use an arrival probability of one. Successors
    reached by several outcomes are merged; zero-probability outcomes are dropped.
    """
    is_random = index < cfg.num_random_sources
    arrival = cfg.source_arrival_prob(index)
    if kind is ActionKind.IDLE:
        decodes = [(False, 1.0)]
    else:
        success = decode_prob(1 if kind is ActionKind.FRESH else source.attempts + 1, cfg)
        decodes = [(True, success), (False, 1.0 - success)]
    arrivals = [(True, arrival), (False, 1.0 - arrival)] if is_random else [(True, 1.0)]

    merged: dict[SourceState, float] = {}
    for (decoded, p_decode), (arrived, p_arrival) in itertools.product(decodes, arrivals):
        prob = p_decode * p_arrival
        if prob <= 0.0:
            continue
        successor = next_source_state(source, kind, decoded, arrived, is_random, cfg.aoi_cap)
        merged[successor] = merged.get(successor, 0.0) + prob
    return list(merged.items())


def transition_kernel(state: SystemState, action: Action, cfg: SystemConfig) -> list[tuple[SystemState, float]]:
    """
    Exact successor distribution, as the product of per-source distributions.

    :raises InfeasibleActionError: If ``action`` is not feasible in ``state``.
    """
    _require_feasible(state, action, cfg)
    per_source = [local_transitions(source, source_kind(action, k), k, cfg) for k, source in enumerate(state)]
    merged: dict[SystemState, float] = {}
    for combo in itertools.product(*per_source):
        prob = 1.0
        for _, p in combo:
            prob *= p
        successor = tuple(s for s, _ in combo)
        merged[successor] = merged.get(successor, 0.0) + prob
    return list(merged.items())
