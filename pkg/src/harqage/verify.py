"""
Oracle suites run by ``harqage verify``.

Each suite compares a closed form against an independent computation on
randomly drawn instances: the next-AoI moments and the drift-plus-penalty
bound against exact kernel enumeration, the kernel against normalisation and
range checks, and the TD-loss gradient against central finite differences.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from harqage.config.models import SystemConfig
from harqage.dql import QNetwork, Transitions, td_loss_and_gradients
from harqage.env import Action, SourceState, SystemState, avg_aoi, feasible_actions, transition_kernel
from harqage.lyapunov import NetworkState, dpp_bound, dpp_objective, expected_next_aoi, expected_next_aoi_sq

logger = logging.getLogger(__name__)

MOMENT_TOL = 1e-10
KERNEL_TOL = 1e-12
GRADIENT_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    samples: int
    max_error: float
    tolerance: float

    def __str__(self) -> str:
        verdict = 'PASS' if self.passed else 'FAIL'
        return f'{verdict} {self.name}: {self.samples} samples, max error {self.max_error:.3e} (tolerance {self.tolerance:g})'


def random_config(rng: np.random.Generator) -> SystemConfig:
    """A small random system; at least one source."""
    num_random = int(rng.integers(0, 3))
    num_gaw = int(rng.integers(0 if num_random else 1, 3))
    cap = int(rng.integers(3, 13))
    return SystemConfig(
        num_random_sources=num_random,
        num_gaw_sources=num_gaw,
        arrival_probs=tuple(float(p) for p in rng.uniform(0.05, 1.0, size=num_random)),
        first_error_prob=float(rng.uniform()),
        harq_gain=float(rng.uniform()),
        max_attempts=int(rng.integers(1, 6)),
        aoi_cap=cap,
        aoi_limit=float(rng.uniform(1.0, cap)),
        dpp_weight=float(rng.uniform(0.1, 100.0)),
        allow_empty_retransmit=bool(rng.integers(2)),
    )


def random_state(cfg: SystemConfig, rng: np.random.Generator) -> SystemState:
    """Arbitrary in-range state; generate-at-will sources keep a zero fresh age."""
    cap = cfg.aoi_cap
    return tuple(
        SourceState(
            fresh_age=int(rng.integers(0, cap + 1)) if k < cfg.num_random_sources else 0,
            proc_age=int(rng.integers(0, cap + 1)),
            aoi=int(rng.integers(0, cap + 1)),
            attempts=int(rng.integers(0, cfg.max_attempts + 1)),
        )
        for k in range(cfg.num_sources)
    )


def _random_point(rng: np.random.Generator) -> tuple[SystemConfig, NetworkState, Action]:
    cfg = random_config(rng)
    system = random_state(cfg, rng)
    actions = feasible_actions(system, cfg)
    action = actions[int(rng.integers(len(actions)))]
    return cfg, NetworkState(system, float(rng.uniform(0.0, 50.0))), action


def check_moments(samples: int, rng: np.random.Generator) -> CheckResult:
    """Closed-form first and second next-AoI moments against the exact kernel."""
    worst = 0.0
    for _ in range(samples):
        cfg, o, action = _random_point(rng)
        kernel = transition_kernel(o.system, action, cfg)
        first = sum(p * avg_aoi(s) for s, p in kernel)
        second = sum(p * avg_aoi(s) ** 2 for s, p in kernel)
        worst = max(
            worst,
            abs(expected_next_aoi(o, action, cfg) - first),
            abs(expected_next_aoi_sq(o, action, cfg) - second),
        )
    return CheckResult('next-AoI moments vs kernel', worst <= MOMENT_TOL, samples, worst, MOMENT_TOL)


def check_dpp_consistency(samples: int, rng: np.random.Generator) -> CheckResult:
    """Closed-form ``W_t`` against the bound composed from the two moments."""
    worst = 0.0
    for _ in range(samples):
        cfg, o, action = _random_point(rng)
        closed = dpp_objective(o, action, cfg)
        composed = dpp_bound(o, action, cfg)
        worst = max(worst, abs(closed - composed) / max(1.0, abs(composed)))
    return CheckResult('drift-plus-penalty closed form', worst <= MOMENT_TOL, samples, worst, MOMENT_TOL)


def check_kernel(samples: int, rng: np.random.Generator) -> CheckResult:
    """Kernel rows sum to one and every successor stays within the caps."""
    worst = 0.0
    for _ in range(samples):
        cfg, o, action = _random_point(rng)
        kernel = transition_kernel(o.system, action, cfg)
        worst = max(worst, abs(sum(p for _, p in kernel) - 1.0))
        for successor, p in kernel:
            in_range = all(
                0 <= s.fresh_age <= cfg.aoi_cap
                and 0 <= s.proc_age <= cfg.aoi_cap
                and 0 <= s.aoi <= cfg.aoi_cap
                and 0 <= s.attempts <= cfg.max_attempts
                for s in successor
            )
            if not in_range or p < 0.0:
                worst = float('inf')
    return CheckResult('kernel normalisation', worst <= KERNEL_TOL, samples, worst, KERNEL_TOL)


def _toy_problem(rng: np.random.Generator) -> tuple[QNetwork, QNetwork, Transitions]:
    sizes = (5, 8, 3)
    online = QNetwork.initialise(sizes, rng)
    target = QNetwork.initialise(sizes, rng)
    batch_size = 6
    masks = rng.random((batch_size, sizes[-1])) < 0.7
    masks[np.arange(batch_size), rng.integers(0, sizes[-1], size=batch_size)] = True
    batch = Transitions(
        features=rng.normal(size=(batch_size, sizes[0])),
        actions=rng.integers(0, sizes[-1], size=batch_size),
        rewards=rng.normal(size=batch_size),
        next_features=rng.normal(size=(batch_size, sizes[0])),
        next_masks=masks,
    )
    return online, target, batch


def check_td_gradient(samples: int, rng: np.random.Generator, eps: float = 1e-6) -> CheckResult:
    """Analytic TD-loss gradient against central finite differences on toy networks."""
    worst = 0.0
    for _ in range(samples):
        online, target, batch = _toy_problem(rng)
        _, analytic = td_loss_and_gradients(online, target, batch, 0.9)
        for param, grad in zip(online.parameters(), analytic):
            flat = param.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                upper, _ = td_loss_and_gradients(online, target, batch, 0.9)
                flat[i] = saved - eps
                lower, _ = td_loss_and_gradients(online, target, batch, 0.9)
                flat[i] = saved
                numeric = (upper - lower) / (2.0 * eps)
                exact = grad.reshape(-1)[i]
                worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4))
    return CheckResult('TD-loss gradient', worst <= GRADIENT_TOL, samples, worst, GRADIENT_TOL)


SUITES: dict[str, Callable[[int, np.random.Generator], CheckResult]] = {
    'moments': check_moments,
    'dpp': check_dpp_consistency,
    'kernel': check_kernel,
    'gradient': check_td_gradient,
}


def run_all(samples: int = 10_000, seed: int = 0) -> list[CheckResult]:
    """Run every suite; the gradient check uses ``max(1, samples // 1000)`` toy networks."""
    rng = np.random.default_rng(seed)
    results = []
    for name, suite in SUITES.items():
        count = max(1, samples // 1000) if name == 'gradient' else samples
        result = suite(count, rng)
        logger.info('%s', result)
        results.append(result)
    return results
