from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from harqage.config.models import SystemConfig
from harqage.env import Action, SourceState, avg_aoi, feasible_actions, transition_kernel
from harqage.errors import DomainError, InfeasibleActionError
from harqage.lyapunov import (
    TRACE_COLUMNS,
    LcdtController,
    NetworkState,
    dpp_bound,
    dpp_objective,
    dpp_objectives,
    expected_next_aoi,
    expected_next_aoi_sq,
    run_lcdt,
    select_action,
    virtual_queue_update,
)
from harqage.verify import random_config, random_state


def _gaw(num_sources: int = 1, **overrides: object) -> SystemConfig:
    data: dict[str, object] = {'num_random_sources': 0, 'num_gaw_sources': num_sources, 'aoi_limit': 4.0}
    data.update(overrides)
    return SystemConfig.model_validate(data)


@pytest.mark.parametrize(('queue', 'aoi', 'expected'), [(0.0, 4.0, 0.0), (2.0, 6.0, 4.0), (1.0, 0.0, 0.0)])
def test_virtual_queue_update(queue: float, aoi: float, expected: float) -> None:
    assert virtual_queue_update(queue, aoi, 4.0) == expected


def test_network_state_rejects_negative_queue() -> None:
    with pytest.raises(DomainError):
        NetworkState((SourceState(0, 0, 0, 0),), -0.5)


def test_next_aoi_moments_after_fresh_transmission() -> None:
    cfg = _gaw(first_error_prob=0.4)
    o = NetworkState((SourceState(0, 2, 5, 1),))
    assert expected_next_aoi(o, Action.fresh(0), cfg) == pytest.approx(3.0)
    assert expected_next_aoi_sq(o, Action.fresh(0), cfg) == pytest.approx(15.0)


def test_next_aoi_moments_when_idle() -> None:
    cfg = _gaw(2, aoi_cap=6)
    o = NetworkState((SourceState(0, 1, 4, 0), SourceState(0, 2, 6, 1)))
    assert expected_next_aoi(o, Action.idle(), cfg) == pytest.approx(5.5)
    assert expected_next_aoi_sq(o, Action.idle(), cfg) == pytest.approx(5.5**2)


def test_moments_reject_infeasible_action() -> None:
    cfg = _gaw(max_attempts=1, aoi_limit=1.0)
    o = NetworkState((SourceState(0, 1, 1, 1),))
    with pytest.raises(InfeasibleActionError):
        expected_next_aoi(o, Action.retransmit(0), cfg)
    with pytest.raises(InfeasibleActionError):
        dpp_objective(o, Action.retransmit(0), cfg)


def test_moments_match_kernel_on_random_instances() -> None:
    rng = np.random.default_rng(7)
    for _ in range(300):
        cfg = random_config(rng)
        o = NetworkState(random_state(cfg, rng), float(rng.uniform(0.0, 20.0)))
        for action in feasible_actions(o.system, cfg):
            kernel = transition_kernel(o.system, action, cfg)
            first = sum(p * avg_aoi(s) for s, p in kernel)
            second = sum(p * avg_aoi(s) ** 2 for s, p in kernel)
            assert expected_next_aoi(o, action, cfg) == pytest.approx(first, abs=1e-10)
            assert expected_next_aoi_sq(o, action, cfg) == pytest.approx(second, abs=1e-9)


def test_idle_objective_without_backlog() -> None:
    cfg = _gaw(2, aoi_cap=6)
    o = NetworkState((SourceState(0, 1, 4, 0), SourceState(0, 2, 6, 1)))
    assert dpp_objective(o, Action.idle(), cfg) == pytest.approx(0.5 * (4.0**2 + 5.5**2))


def test_closed_form_matches_composed_bound() -> None:
    rng = np.random.default_rng(11)
    for _ in range(300):
        cfg = random_config(rng)
        o = NetworkState(random_state(cfg, rng), float(rng.uniform(0.0, 50.0)))
        actions = feasible_actions(o.system, cfg)
        batch = dpp_objectives(o, actions, cfg)
        for value, action in zip(batch, actions):
            composed = dpp_bound(o, action, cfg)
            assert value == pytest.approx(composed, rel=1e-10, abs=1e-10)
            assert dpp_objective(o, action, cfg) == pytest.approx(value)


def test_huge_weight_prefers_idle() -> None:
    rng = np.random.default_rng(5)
    for _ in range(200):
        cfg = random_config(rng).with_updates(dpp_weight=1e9)
        o = NetworkState(random_state(cfg, rng), float(rng.uniform(0.0, 50.0)))
        assert select_action(o, cfg) == Action.idle()


def test_zero_state_without_backlog_idles() -> None:
    cfg = _gaw(2, dpp_weight=100.0)
    o = NetworkState((SourceState(0, 0, 0, 0), SourceState(0, 0, 0, 0)))
    assert select_action(o, cfg) == Action.idle()


def test_large_backlog_forces_transmission() -> None:
    cfg = _gaw(2, dpp_weight=30.0)
    o = NetworkState((SourceState(0, 0, 17, 0), SourceState(0, 0, 2, 0)), queue=1e4)
    chosen = select_action(o, cfg)
    assert chosen == Action.fresh(0)
    candidates = feasible_actions(o.system, cfg)
    values = [dpp_objective(o, action, cfg) for action in candidates]
    assert chosen == candidates[int(np.argmin(values))]


def test_ties_resolve_to_lowest_code() -> None:
    cfg = _gaw(2, first_error_prob=0.0, dpp_weight=1.0, aoi_limit=2.0)
    o = NetworkState((SourceState(0, 3, 3, 0), SourceState(0, 3, 3, 0)), queue=100.0)
    values = dpp_objectives(o, feasible_actions(o.system, cfg), cfg)
    assert values[1] == pytest.approx(values[2])
    assert select_action(o, cfg) == Action.fresh(0)


def test_controller_tracks_queue(rng: np.random.Generator) -> None:
    cfg = _gaw(aoi_limit=2.0)
    controller = LcdtController(cfg)
    assert controller.name == 'lcdt'
    trace = run_lcdt(cfg, 50, rng)
    assert np.all(trace.queue >= 0.0)
    controller.queue = 3.0
    controller.reset()
    assert controller.queue == 0.0


def test_perfect_channel_meets_limit(rng: np.random.Generator) -> None:
    cfg = _gaw(first_error_prob=0.0, aoi_limit=2.0, dpp_weight=5.0)
    trace = run_lcdt(cfg, 20_000, rng)
    assert trace.delta_bar(0.1) <= 2.0 + 0.05
    assert 0.0 < trace.tau_bar(0.1) < 1.0
    assert trace.running_delta_bar[-1] == pytest.approx(trace.delta_bar())


@pytest.mark.parametrize('horizon', [4_000, 20_000])
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_average_age_within_finite_horizon_bound(desk_config: SystemConfig, horizon: int, seed: int) -> None:
    trace = run_lcdt(desk_config, horizon, np.random.default_rng(seed))
    assert trace.delta_bar() <= desk_config.aoi_limit + trace.queue[-1] / horizon + 1e-9
    assert trace.delta_bar() <= desk_config.aoi_limit + 5.0 / np.sqrt(horizon)


def test_select_action_scores_only_feasible_candidates(monkeypatch: pytest.MonkeyPatch) -> None:
    scored: list[int] = []

    def counting(o: NetworkState, actions: list[Action], cfg: SystemConfig) -> np.ndarray:
        scored.append(len(actions))
        return dpp_objectives(o, actions, cfg)

    monkeypatch.setattr('harqage.lyapunov.dpp_objectives', counting)
    rng = np.random.default_rng(11)
    for _ in range(300):
        cfg = random_config(rng)
        system = random_state(cfg, rng)
        select_action(NetworkState(system, float(rng.uniform(0.0, 50.0))), cfg)
        assert scored[-1] == len(feasible_actions(system, cfg))
        assert scored[-1] <= 2 * cfg.num_sources + 1
    assert len(scored) == 300


def test_run_lcdt_rejects_empty_horizon(rng: np.random.Generator) -> None:
    with pytest.raises(DomainError):
        run_lcdt(_gaw(), 0, rng)


def test_trace_csv(tmp_path: Path, desk_config: SystemConfig, rng: np.random.Generator) -> None:
    trace = run_lcdt(desk_config, 100, rng)
    path = tmp_path / 'lcdt-trace.csv'
    trace.write_csv(path)
    with open(path, encoding='utf-8') as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == 101
    assert rows[-1][0] == '100'
    assert float(rows[-1][5]) == pytest.approx(trace.delta_bar())
