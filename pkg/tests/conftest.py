from __future__ import annotations

import math
from collections.abc import Callable

import numpy as np
import pytest

from harqage.cmdp import enumerate_states
from harqage.config.models import SystemConfig


@pytest.fixture
def desk_config() -> SystemConfig:
    """Desk instance used across modules: one random-arrival and one generate-at-will source."""
    return SystemConfig(
        num_random_sources=1,
        num_gaw_sources=1,
        arrival_probs=0.7,
        first_error_prob=0.4,
        harq_gain=0.4,
        max_attempts=3,
        aoi_cap=10,
        aoi_limit=4.0,
    )


@pytest.fixture
def gaw_config() -> SystemConfig:
    """A single generate-at-will source."""
    return SystemConfig(
        num_random_sources=0,
        num_gaw_sources=1,
        first_error_prob=0.4,
        harq_gain=0.4,
        max_attempts=3,
        aoi_cap=8,
        aoi_limit=3.0,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def _limit_distribution(chain: np.ndarray, squarings: int = 40) -> np.ndarray:
    """
    Cesaro limit of a row-stochastic matrix started in state 0.

    Squares the lazy chain and renormalises the rows after every product.
    """
    limit = 0.5 * (chain + np.eye(chain.shape[0]))
    for _ in range(squarings):
        limit = limit @ limit
        limit /= limit.sum(axis=1, keepdims=True)
    return limit[0]


@pytest.fixture
def brute_force_gain() -> Callable[[SystemConfig, float], float]:
    """
    Returns a function computing the optimal Lagrangian average cost from the
    all-zero state by enumerating every deterministic policy.

    Only states a partial policy reaches from the all-zero state are assigned an
    action, so the enumeration stays small on tiny instances.
    """

    def _brute_force_gain(cfg: SystemConfig, beta: float) -> float:
        space = enumerate_states(cfg)
        model = space.transitions()
        dense = [matrix.toarray() for matrix in model.matrices]
        choices = [np.flatnonzero(model.feasible[:, s]) for s in range(len(space))]
        stage = beta * space.avg_aoi
        best = math.inf

        def first_unassigned(assignment: dict[int, int]) -> int | None:
            seen = {0}
            stack = [0]
            while stack:
                s = stack.pop()
                if s not in assignment:
                    return s
                for successor in np.flatnonzero(dense[assignment[s]][s]):
                    if int(successor) not in seen:
                        seen.add(int(successor))
                        stack.append(int(successor))
            return None

        def gain(assignment: dict[int, int]) -> float:
            chain = np.eye(len(space))
            cost = np.zeros(len(space))
            for s, code in assignment.items():
                chain[s] = dense[code][s]
                cost[s] = model.costs[code] + stage[s]
            return float(_limit_distribution(chain) @ cost)

        def visit(assignment: dict[int, int]) -> None:
            nonlocal best
            s = first_unassigned(assignment)
            if s is None:
                best = min(best, gain(assignment))
                return
            for code in choices[s]:
                assignment[s] = int(code)
                visit(assignment)
                del assignment[s]

        visit({})
        return best

    return _brute_force_gain


@pytest.fixture
def limit_distribution() -> Callable[[np.ndarray], np.ndarray]:
    return _limit_distribution
