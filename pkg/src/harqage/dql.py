"""
Deep Q-learning for the unknown-environment case.

The agent sees the network state (all source ages, attempt counts and the
virtual queue), receives the reward ``-(V * tau + L(Q') - L(Q))`` with
``L(Q) = Q^2 / 2`` and learns a Q-network from replayed transitions against a
periodically synchronised target network. Everything is plain numpy.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from harqage.config.models import SystemConfig, TrainConfig
from harqage.env import Action, StepOutcome, SystemState, feasible_actions, initial_state, num_action_codes, step
from harqage.errors import DomainError, TrainingDivergedError
from harqage.lyapunov import NetworkState, virtual_queue_update

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ('episode', 'mean_return', 'tau_bar', 'delta_bar', 'epsilon', 'loss')


class QNetwork:
    """
    Fully connected network with ReLU hidden layers and a linear output.

    ``weights[i]`` has shape ``(sizes[i], sizes[i + 1])``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise DomainError('A network needs one bias vector per weight matrix')
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @classmethod
    def initialise(cls, sizes: Sequence[int], rng: np.random.Generator) -> QNetwork:
        """He-normal weights, zero biases."""
        weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) for fan_in, fan_out in zip(sizes, sizes[1:])]
        biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
        return cls(weights, biases)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Output and the input of every layer, for :meth:`backward`."""
        activations = [np.atleast_2d(x)]
        out = activations[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = out @ w + b
            if i < last:
                out = np.maximum(out, 0.0)
                activations.append(out)
        return out, activations

    def backward(self, activations: list[np.ndarray], grad_out: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar loss given ``d loss / d output``."""
        grads_w: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        grads_b: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        delta = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0.0)
        return grads_w, grads_b

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> QNetwork:
        return QNetwork(self.weights, self.biases)

    def load_from(self, other: QNetwork) -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs

    def soft_update(self, other: QNetwork, tau: float) -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine *= 1.0 - tau
            mine += tau * theirs

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


class Adam:
    """Adam optimiser over the parameters of one network."""

    def __init__(self, network: QNetwork, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p) for p in network.parameters()]
        self._v = [np.zeros_like(p) for p in network.parameters()]

    def step(self, network: QNetwork, grads: Sequence[np.ndarray]) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for param, grad, m, v in zip(network.parameters(), grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad**2
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class Transitions(NamedTuple):
    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_features: np.ndarray
    next_masks: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, feature_dim: int, num_actions: int):
        self.capacity = capacity
        self.features = np.zeros((capacity, feature_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_features = np.zeros((capacity, feature_dim))
        self.next_masks = np.zeros((capacity, num_actions), dtype=bool)
        self.position = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, features: np.ndarray, action: int, reward: float, next_features: np.ndarray, next_mask: np.ndarray) -> None:
        i = self.position
        self.features[i] = features
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_features[i] = next_features
        self.next_masks[i] = next_mask
        self.position = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Transitions:
        """Uniform sample without replacement."""
        if batch_size > self.size:
            raise DomainError(f'Cannot sample {batch_size} transitions from a buffer holding {self.size}')
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return Transitions(self.features[idx], self.actions[idx], self.rewards[idx], self.next_features[idx], self.next_masks[idx])


def feature_dim(num_sources: int) -> int:
    return 4 * num_sources + 1


def default_queue_scale(cfg: SystemConfig) -> float:
    return 4.0 * cfg.aoi_cap


def featurize(o: NetworkState, cfg: SystemConfig, queue_scale: float | None = None) -> np.ndarray:
    """
    ``(fresh_age, proc_age, aoi, attempts)`` of every source, then ``Q``.

    Ages are divided by the AoI cap, attempts by ``max_attempts`` and ``Q`` by
    ``queue_scale``.
    """
    scale = queue_scale or default_queue_scale(cfg)
    out = np.empty(feature_dim(len(o.system)))
    for k, source in enumerate(o.system):
        out[4 * k] = source.fresh_age / cfg.aoi_cap
        out[4 * k + 1] = source.proc_age / cfg.aoi_cap
        out[4 * k + 2] = source.aoi / cfg.aoi_cap
        out[4 * k + 3] = source.attempts / cfg.max_attempts
    out[-1] = o.queue / scale
    return out


def feasibility_mask(state: SystemState, cfg: SystemConfig) -> np.ndarray:
    mask = np.zeros(num_action_codes(len(state)), dtype=bool)
    for action in feasible_actions(state, cfg):
        mask[action.code(len(state))] = True
    return mask


def reward(action: Action, queue_before: float, queue_after: float, dpp_weight: float) -> float:
    """``-(V * 1[transmit] + Q_after^2 / 2 - Q_before^2 / 2)``."""
    return -(dpp_weight * float(action.is_transmission) + 0.5 * queue_after**2 - 0.5 * queue_before**2)


def act(network: QNetwork, features: np.ndarray, mask: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action code restricted to ``mask``."""
    allowed = np.flatnonzero(mask)
    if allowed.size == 0:
        raise DomainError('No feasible action in mask')
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.choice(allowed))
    values = network.forward(features)[0]
    values = np.where(mask, values, -np.inf)
    return int(np.argmax(values))


def td_loss_and_gradients(
    online: QNetwork,
    target: QNetwork,
    batch: Transitions,
    discount: float,
) -> tuple[float, list[np.ndarray]]:
    """
    Half mean squared TD error and its gradient with respect to ``online``.

    The target is ``r + discount * max_{a' feasible} Q_target(s', a')``; there
    are no terminal states. Gradients come weights first, then biases.
    """
    q, activations = online.forward_cache(batch.features)
    rows = np.arange(q.shape[0])
    next_q = np.where(batch.next_masks, target.forward(batch.next_features), -np.inf)
    targets = batch.rewards + discount * next_q.max(axis=1)
    td = q[rows, batch.actions] - targets
    loss = 0.5 * float(np.mean(td**2))
    grad_out = np.zeros_like(q)
    grad_out[rows, batch.actions] = td / q.shape[0]
    grads_w, grads_b = online.backward(activations, grad_out)
    return loss, [*grads_w, *grads_b]


def clip_gradients(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    """Rescale to a global L2 norm of at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g**2)) for g in grads)))
    if norm <= max_norm or norm == 0.0:
        return grads
    return [g * (max_norm / norm) for g in grads]


def epsilon_at(step_index: int, train: TrainConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end`` over the decay fraction of all steps."""
    decay_steps = max(1, int(train.total_steps * train.epsilon_decay_fraction))
    progress = min(step_index / decay_steps, 1.0)
    return train.epsilon_start + progress * (train.epsilon_end - train.epsilon_start)


@dataclass(frozen=True)
class EpisodeStats:
    episode: int
    mean_return: float
    tau_bar: float
    delta_bar: float
    epsilon: float
    loss: float


@dataclass
class TrainResult:
    network: QNetwork
    target: QNetwork
    queue_scale: float
    history: list[EpisodeStats] = field(default_factory=list)
    gradient_steps: int = 0

    def write_learning_curve(self, path: str | Path) -> None:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(CURVE_COLUMNS)
            for stats in self.history:
                writer.writerow(
                    [
                        stats.episode,
                        repr(stats.mean_return),
                        repr(stats.tau_bar),
                        repr(stats.delta_bar),
                        repr(stats.epsilon),
                        repr(stats.loss),
                    ]
                )


def train(cfg: SystemConfig, train_cfg: TrainConfig, rng: np.random.Generator | None = None) -> TrainResult:
    """
    Train a Q-network by interacting with the simulator.

    Each episode restarts from the all-zero state with an empty queue. The
    agent only observes states, rewards and feasibility masks.

    :raises TrainingDivergedError: If the loss or any weight becomes non-finite.
    """
    rng = rng or np.random.default_rng(train_cfg.train_seed)
    num_sources = cfg.num_sources
    queue_scale = train_cfg.q_feature_scale or default_queue_scale(cfg)
    sizes = (feature_dim(num_sources), *train_cfg.hidden_sizes, num_action_codes(num_sources))
    online = QNetwork.initialise(sizes, rng)
    result = TrainResult(network=online, target=online.copy(), queue_scale=queue_scale)
    optimiser = Adam(online, train_cfg.learning_rate)
    buffer = ReplayBuffer(train_cfg.replay_capacity, sizes[0], sizes[-1])
    ready = max(train_cfg.batch_size, train_cfg.warmup_steps)
    global_step = 0

    for episode in range(1, train_cfg.episodes + 1):
        state = initial_state(cfg)
        queue = 0.0
        features = featurize(NetworkState(state, queue), cfg, queue_scale)
        mask = feasibility_mask(state, cfg)
        total_reward = transmissions = aoi_sum = 0.0
        losses: list[float] = []
        epsilon = epsilon_at(global_step, train_cfg)
        for _ in range(train_cfg.steps_per_episode):
            epsilon = epsilon_at(global_step, train_cfg)
            code = act(online, features, mask, epsilon, rng)
            action = Action.from_code(code, num_sources)
            outcome = step(state, action, rng, cfg)
            next_queue = virtual_queue_update(queue, outcome.aoi_cost, cfg.aoi_limit)
            r = reward(action, queue, next_queue, cfg.dpp_weight)
            next_features = featurize(NetworkState(outcome.next_state, next_queue), cfg, queue_scale)
            next_mask = feasibility_mask(outcome.next_state, cfg)
            buffer.push(features, code, r * train_cfg.reward_scale, next_features, next_mask)
            total_reward += r
            transmissions += outcome.cost
            aoi_sum += outcome.aoi_cost
            global_step += 1

            if len(buffer) >= ready and global_step % train_cfg.train_every == 0:
                losses.append(_gradient_step(result, optimiser, buffer, train_cfg, rng))

            state, queue, features, mask = outcome.next_state, next_queue, next_features, next_mask

        steps = train_cfg.steps_per_episode
        stats = EpisodeStats(
            episode=episode,
            mean_return=total_reward / steps,
            tau_bar=transmissions / steps,
            delta_bar=aoi_sum / steps,
            epsilon=epsilon,
            loss=float(np.mean(losses)) if losses else float('nan'),
        )
        result.history.append(stats)
        logger.debug(
            'episode %d: return %.3f tau_bar %.4f delta_bar %.4f epsilon %.3f loss %.5g',
            episode,
            stats.mean_return,
            stats.tau_bar,
            stats.delta_bar,
            stats.epsilon,
            stats.loss,
        )
        if episode % 10 == 0 or episode == train_cfg.episodes:
            logger.info('Trained %d/%d episodes (%d gradient steps)', episode, train_cfg.episodes, result.gradient_steps)
    return result


def _gradient_step(
    result: TrainResult,
    optimiser: Adam,
    buffer: ReplayBuffer,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    batch = buffer.sample(train_cfg.batch_size, rng)
    loss, grads = td_loss_and_gradients(result.network, result.target, batch, train_cfg.discount)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f'TD loss became {loss} after {result.gradient_steps} gradient steps')
    optimiser.step(result.network, clip_gradients(grads, train_cfg.grad_clip))
    if not result.network.is_finite():
        raise TrainingDivergedError(f'Non-finite weights after {result.gradient_steps + 1} gradient steps')
    result.gradient_steps += 1
    if train_cfg.target_update == 'hard':
        if result.gradient_steps % train_cfg.target_sync_steps == 0:
            result.target.load_from(result.network)
    else:
        result.target.soft_update(result.network, train_cfg.target_soft_tau)
    return loss


class DqlController:
    """Greedy policy of a trained network, tracking its own virtual queue."""

    name = 'dql'

    def __init__(self, network: QNetwork, cfg: SystemConfig, queue_scale: float | None = None):
        expected = (feature_dim(cfg.num_sources), num_action_codes(cfg.num_sources))
        if (network.sizes[0], network.sizes[-1]) != expected:
            raise DomainError(f'Network shape {network.sizes} does not fit {cfg.num_sources} sources')
        self.network = network
        self.cfg = cfg
        self.queue_scale = queue_scale or default_queue_scale(cfg)
        self.queue = 0.0

    def reset(self) -> None:
        self.queue = 0.0

    def decide(self, state: SystemState, rng: np.random.Generator) -> Action:
        features = featurize(NetworkState(state, self.queue), self.cfg, self.queue_scale)
        code = act(self.network, features, feasibility_mask(state, self.cfg), 0.0, rng)
        return Action.from_code(code, self.cfg.num_sources)

    def observe(self, state: SystemState, action: Action, outcome: StepOutcome) -> None:
        self.queue = virtual_queue_update(self.queue, outcome.aoi_cost, self.cfg.aoi_limit)
