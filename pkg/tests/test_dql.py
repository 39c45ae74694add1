from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from harqage.config.models import SystemConfig, TrainConfig
from harqage.dql import (
    CURVE_COLUMNS,
    Adam,
    DqlController,
    QNetwork,
    ReplayBuffer,
    Transitions,
    act,
    clip_gradients,
    epsilon_at,
    feasibility_mask,
    feature_dim,
    featurize,
    reward,
    td_loss_and_gradients,
    train,
)
from harqage.env import Action, SourceState, initial_state, step
from harqage.errors import DomainError
from harqage.lyapunov import NetworkState
from harqage.verify import check_td_gradient


def test_featurize_zero_state(desk_config: SystemConfig) -> None:
    features = featurize(NetworkState(initial_state(desk_config)), desk_config)
    assert features.shape == (feature_dim(2),)
    assert not features.any()


def test_featurize_scales_components(desk_config: SystemConfig) -> None:
    cap = desk_config.aoi_cap
    o = NetworkState((SourceState(2, 5, cap, 3), SourceState(0, 1, 4, 0)), queue=20.0)
    features = featurize(o, desk_config, queue_scale=40.0)
    assert features[2] == 1.0
    assert features[3] == 1.0
    assert features[0] == pytest.approx(2 / cap)
    assert features[-1] == pytest.approx(0.5)


@pytest.mark.parametrize(
    ('action', 'before', 'after', 'expected'),
    [(Action.idle(), 0.0, 0.0, 0.0), (Action.fresh(0), 2.0, 4.0, -36.0), (Action.retransmit(1), 0.0, 0.0, -30.0)],
)
def test_reward(action: Action, before: float, after: float, expected: float) -> None:
    assert reward(action, before, after, 30.0) == pytest.approx(expected)


def test_idle_reward_positive_when_queue_drains() -> None:
    assert reward(Action.idle(), 5.0, 3.0, 30.0) > 0.0


def test_feasibility_mask(gaw_config: SystemConfig) -> None:
    mask = feasibility_mask((SourceState(0, 1, 1, gaw_config.max_attempts),), gaw_config)
    assert mask.tolist() == [True, True, False]


def test_uniform_exploration_over_mask(rng: np.random.Generator) -> None:
    network = QNetwork.initialise((5, 4, 5), rng)
    mask = np.array([True, False, True, True, False])
    draws = [act(network, np.zeros(5), mask, 1.0, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=5)
    assert counts[1] == counts[4] == 0
    assert stats.chisquare(counts[mask]).pvalue > 1e-3


def test_greedy_action_respects_weights(rng: np.random.Generator) -> None:
    network = QNetwork([np.zeros((5, 3))], [np.array([2.0, 1.0, 3.0])])
    assert act(network, np.zeros(5), np.array([True, True, False]), 0.0, rng) == 0
    assert act(network, np.zeros(5), np.ones(3, dtype=bool), 0.0, rng) == 2
    with pytest.raises(DomainError):
        act(network, np.zeros(5), np.zeros(3, dtype=bool), 0.0, rng)


def test_replay_buffer_evicts_oldest(rng: np.random.Generator) -> None:
    buffer = ReplayBuffer(3, 2, 3)
    for i in range(5):
        buffer.push(np.full(2, i), i % 3, float(i), np.full(2, i + 1), np.ones(3, dtype=bool))
    assert len(buffer) == 3
    assert sorted(buffer.rewards.tolist()) == [2.0, 3.0, 4.0]
    batch = buffer.sample(3, rng)
    assert sorted(batch.rewards.tolist()) == [2.0, 3.0, 4.0]
    with pytest.raises(DomainError):
        buffer.sample(4, rng)


def test_td_gradient_matches_finite_differences(rng: np.random.Generator) -> None:
    result = check_td_gradient(3, rng)
    assert result.passed, str(result)


def test_td_target_ignores_masked_actions() -> None:
    online = QNetwork([np.zeros((1, 2))], [np.zeros(2)])
    target = QNetwork([np.zeros((1, 2))], [np.array([100.0, 1.0])])
    batch = Transitions(
        features=np.zeros((1, 1)),
        actions=np.array([0]),
        rewards=np.array([0.5]),
        next_features=np.zeros((1, 1)),
        next_masks=np.array([[False, True]]),
    )
    loss, grads = td_loss_and_gradients(online, target, batch, 0.5)
    assert loss == pytest.approx(0.5 * (0.5 + 0.5 * 1.0) ** 2)
    assert grads[1][0] == pytest.approx(-1.0)


def test_clip_gradients() -> None:
    grads = [np.array([3.0]), np.array([4.0])]
    clipped = clip_gradients(grads, 1.0)
    assert float(np.sqrt(sum(np.sum(g**2) for g in clipped))) == pytest.approx(1.0)
    assert clip_gradients(grads, None) is grads
    assert clip_gradients(grads, 10.0) is grads


def test_epsilon_schedule() -> None:
    cfg = TrainConfig(episodes=10, steps_per_episode=100, epsilon_decay_fraction=0.5)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(250, cfg) == pytest.approx(0.525)
    assert epsilon_at(500, cfg) == pytest.approx(0.05)
    assert epsilon_at(900, cfg) == pytest.approx(0.05)


def test_adam_reduces_loss(rng: np.random.Generator) -> None:
    network = QNetwork.initialise((3, 8, 2), rng)
    target = network.copy()
    batch = Transitions(
        features=rng.normal(size=(16, 3)),
        actions=rng.integers(0, 2, size=16),
        rewards=rng.normal(size=16),
        next_features=rng.normal(size=(16, 3)),
        next_masks=np.ones((16, 2), dtype=bool),
    )
    optimiser = Adam(network, 1e-2)
    first, _ = td_loss_and_gradients(network, target, batch, 0.0)
    for _ in range(200):
        _, grads = td_loss_and_gradients(network, target, batch, 0.0)
        optimiser.step(network, grads)
    last, _ = td_loss_and_gradients(network, target, batch, 0.0)
    assert last < first


def test_target_updates(rng: np.random.Generator) -> None:
    online = QNetwork.initialise((3, 4, 2), rng)
    target = QNetwork.initialise((3, 4, 2), rng)
    before = target.weights[0].copy()
    target.soft_update(online, 0.25)
    assert np.allclose(target.weights[0], 0.75 * before + 0.25 * online.weights[0])
    target.load_from(online)
    assert all(np.array_equal(a, b) for a, b in zip(target.parameters(), online.parameters()))
    assert target.weights[0] is not online.weights[0]


def _flat(network: QNetwork) -> np.ndarray:
    return np.concatenate([p.ravel() for p in network.parameters()])


@pytest.mark.parametrize('mode', ['hard', 'soft'])
def test_training_updates_target_on_schedule(
    monkeypatch: pytest.MonkeyPatch, gaw_config: SystemConfig, mode: str
) -> None:
    seen: list[tuple[np.ndarray, np.ndarray]] = []

    def recording(online: QNetwork, target: QNetwork, batch: Transitions, discount: float) -> object:
        seen.append((_flat(online), _flat(target)))
        return td_loss_and_gradients(online, target, batch, discount)

    monkeypatch.setattr('harqage.dql.td_loss_and_gradients', recording)
    train_cfg = TrainConfig(
        episodes=2,
        steps_per_episode=60,
        batch_size=8,
        warmup_steps=8,
        hidden_sizes=(8,),
        target_update=mode,
        target_sync_steps=7,
        target_soft_tau=0.2,
    )
    result = train(gaw_config, train_cfg, np.random.default_rng(4))
    assert len(seen) == result.gradient_steps > 14

    for done in range(1, len(seen)):
        online, target = seen[done]
        previous_target = seen[done - 1][1]
        if mode == 'hard':
            if done % 7 == 0:
                assert np.array_equal(target, online)
            else:
                assert np.array_equal(target, previous_target)
        else:
            assert np.allclose(target, 0.8 * previous_target + 0.2 * online)


def test_training_learns_to_idle_when_transmissions_are_wasted() -> None:
    cfg = SystemConfig(
        num_random_sources=0,
        num_gaw_sources=1,
        first_error_prob=0.0,
        aoi_cap=8,
        aoi_limit=8.0,
        dpp_weight=100.0,
    )
    train_cfg = TrainConfig(
        episodes=10,
        steps_per_episode=200,
        hidden_sizes=(16, 16),
        learning_rate=3e-3,
        discount=0.9,
        warmup_steps=100,
        target_sync_steps=100,
        replay_capacity=2000,
    )
    result = train(cfg, train_cfg, np.random.default_rng(1))
    assert len(result.history) == 10
    assert result.gradient_steps > 0
    assert result.network.is_finite()

    controller = DqlController(result.network, cfg, result.queue_scale)
    rng = np.random.default_rng(2)
    state = initial_state(cfg)
    transmissions = 0
    for _ in range(1000):
        action = controller.decide(state, rng)
        outcome = step(state, action, rng, cfg)
        controller.observe(state, action, outcome)
        transmissions += outcome.cost
        state = outcome.next_state
    assert transmissions / 1000 < 0.2


def test_learning_curve_csv(tmp_path: Path, gaw_config: SystemConfig) -> None:
    train_cfg = TrainConfig(episodes=3, steps_per_episode=40, batch_size=8, warmup_steps=8, hidden_sizes=(8,))
    result = train(gaw_config, train_cfg)
    path = tmp_path / 'learning-curve.csv'
    result.write_learning_curve(path)
    with open(path, encoding='utf-8') as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == CURVE_COLUMNS
    assert [row[0] for row in rows[1:]] == ['1', '2', '3']


def test_training_is_reproducible(gaw_config: SystemConfig) -> None:
    train_cfg = TrainConfig(episodes=2, steps_per_episode=50, batch_size=8, warmup_steps=8, hidden_sizes=(8,), train_seed=4)
    first = train(gaw_config, train_cfg)
    second = train(gaw_config, train_cfg)
    assert all(np.array_equal(a, b) for a, b in zip(first.network.parameters(), second.network.parameters()))


def test_controller_rejects_mismatched_network(desk_config: SystemConfig, rng: np.random.Generator) -> None:
    network = QNetwork.initialise((feature_dim(1), 4, 3), rng)
    with pytest.raises(DomainError):
        DqlController(network, desk_config)
