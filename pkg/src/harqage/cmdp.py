"""
Known-environment solver for the constrained MDP.

The reachable state space is enumerated once; for a Lagrange multiplier
``beta`` relative value iteration yields a deterministic ``beta``-optimal
policy for the per-slot cost ``c(a) + beta * d(s)``; bisection over ``beta``
returns the best feasible policy and the infeasible lower-bound policy.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as sparse_linalg

from harqage.config.models import SolverConfig, SystemConfig
from harqage.env import (
    Action,
    ActionKind,
    SourceState,
    SystemState,
    avg_aoi,
    can_retransmit,
    initial_state,
    local_transitions,
    num_action_codes,
    source_kind,
    step,
)
from harqage.errors import (
    ConvergenceError,
    DomainError,
    InfeasibleActionError,
    InfeasibleConstraintError,
    PolicyLookupError,
    StateSpaceTooLargeError,
)
from harqage.stats import batch_means_halfwidth

logger = logging.getLogger(__name__)

EvalMode = Literal['exact', 'monte_carlo']

_CHUNK_ROWS = 200_000
_MAX_ENCODABLE = 2**62


@dataclass(frozen=True)
class LocalTable:
    """
    Reachable states of one source and its padded successor arrays.

    ``successors[kind]`` and ``probs[kind]`` have shape ``(n, width)``; padding
    entries point at state 0 with probability 0.
    """

    states: tuple[SourceState, ...]
    index: dict[SourceState, int]
    successors: tuple[np.ndarray, ...]
    probs: tuple[np.ndarray, ...]
    feasible: tuple[np.ndarray, ...]
    aoi: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def build_local_table(source: int, cfg: SystemConfig) -> LocalTable:
    """Closure of the all-zero source state under idle, fresh and (feasible) retransmit."""
    start = SourceState(0, 0, 0, 0)
    states = [start]
    index = {start: 0}
    rows: list[dict[ActionKind, list[tuple[SourceState, float]]]] = []
    cursor = 0
    while cursor < len(states):
        state = states[cursor]
        row: dict[ActionKind, list[tuple[SourceState, float]]] = {}
        for kind in ActionKind:
            if kind is ActionKind.RETRANSMIT and not can_retransmit(state, cfg):
                continue
            branches = local_transitions(state, kind, source, cfg)
            for successor, _ in branches:
                if successor not in index:
                    index[successor] = len(states)
                    states.append(successor)
            row[kind] = branches
        rows.append(row)
        cursor += 1

    n = len(states)
    successors, probs, feasible = [], [], []
    for kind in ActionKind:
        width = max((len(row[kind]) for row in rows if kind in row), default=1)
        succ = np.zeros((n, width), dtype=np.int64)
        prob = np.zeros((n, width), dtype=np.float64)
        mask = np.zeros(n, dtype=bool)
        for i, row in enumerate(rows):
            if kind not in row:
                continue
            mask[i] = True
            for j, (successor, p) in enumerate(row[kind]):
                succ[i, j] = index[successor]
                prob[i, j] = p
        successors.append(succ)
        probs.append(prob)
        feasible.append(mask)
    aoi = np.array([state.aoi for state in states], dtype=np.float64)
    return LocalTable(tuple(states), index, tuple(successors), tuple(probs), tuple(feasible), aoi)


class JointEncoding:
    """Mixed-radix integer encoding of joint states over the per-source tables."""

    def __init__(self, tables: tuple[LocalTable, ...]):
        self.tables = tables
        sizes = [len(table) for table in tables]
        box = math.prod(sizes)
        if box >= _MAX_ENCODABLE:
            raise StateSpaceTooLargeError(box, _MAX_ENCODABLE)
        strides = [1] * len(sizes)
        for k in range(len(sizes) - 2, -1, -1):
            strides[k] = strides[k + 1] * sizes[k + 1]
        self.sizes = np.array(sizes, dtype=np.int64)
        self.strides = np.array(strides, dtype=np.int64)

    @property
    def num_sources(self) -> int:
        return len(self.tables)

    def decompose(self, ids: np.ndarray) -> np.ndarray:
        """Local indices, shape ``(len(ids), K)``."""
        return (ids[:, None] // self.strides[None, :]) % self.sizes[None, :]

    def encode_state(self, state: SystemState) -> int:
        try:
            locals_ = [table.index[source] for table, source in zip(self.tables, state)]
        except KeyError:
            raise PolicyLookupError(f'State {state} is not reachable from the all-zero state')
        return int(sum(int(stride) * local for stride, local in zip(self.strides, locals_)))

    def decode_state(self, joint_id: int) -> SystemState:
        locals_ = self.decompose(np.array([joint_id], dtype=np.int64))[0]
        return tuple(table.states[int(local)] for table, local in zip(self.tables, locals_))

    def successors(self, ids: np.ndarray, code: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Joint successors of ``ids`` under action ``code``.

        :return: successor ids ``(F, M)``, probabilities ``(F, M)`` (zero for padding
            and infeasible rows) and the feasibility mask ``(F,)``.
        """
        action = Action.from_code(code, self.num_sources)
        locals_ = self.decompose(ids)
        rows = ids.shape[0]
        succ = np.zeros((rows, 1), dtype=np.int64)
        prob = np.ones((rows, 1), dtype=np.float64)
        feasible = np.ones(rows, dtype=bool)
        for k, table in enumerate(self.tables):
            kind = source_kind(action, k)
            local = locals_[:, k]
            succ_k = table.successors[kind][local]
            prob_k = table.probs[kind][local]
            feasible &= table.feasible[kind][local]
            succ = (succ[:, :, None] + succ_k[:, None, :] * self.strides[k]).reshape(rows, -1)
            prob = (prob[:, :, None] * prob_k[:, None, :]).reshape(rows, -1)
        return succ, prob, feasible


def _chunks(array: np.ndarray, size: int = _CHUNK_ROWS) -> Iterator[tuple[int, np.ndarray]]:
    for start in range(0, array.shape[0], size):
        yield start, array[start : start + size]


@dataclass(frozen=True)
class TransitionModel:
    """One sparse transition matrix and feasibility mask per action code."""

    matrices: tuple[sparse.csr_matrix, ...]
    feasible: np.ndarray
    costs: np.ndarray

    @property
    def num_actions(self) -> int:
        return len(self.matrices)


class StateSpace:
    """
    Reachable joint states, densely indexed in breadth-first discovery order.

    Index 0 is the all-zero state, which also serves as the reference state.
    """

    reference_index = 0

    def __init__(self, cfg: SystemConfig, encoding: JointEncoding, ids: np.ndarray):
        self.cfg = cfg
        self.encoding = encoding
        self.ids = ids
        self._order = np.argsort(ids, kind='stable')
        self._sorted = ids[self._order]
        self._transitions: TransitionModel | None = None

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __getitem__(self, index: int) -> SystemState:
        return self.encoding.decode_state(int(self.ids[index]))

    def __iter__(self) -> Iterator[SystemState]:
        for index in range(len(self)):
            yield self[index]

    @property
    def num_actions(self) -> int:
        return num_action_codes(self.cfg.num_sources)

    @cached_property
    def states(self) -> list[SystemState]:
        return list(self)

    @cached_property
    def local_indices(self) -> np.ndarray:
        return self.encoding.decompose(self.ids)

    @cached_property
    def avg_aoi(self) -> np.ndarray:
        """Average AoI of every state, in index order."""
        total = np.zeros(len(self), dtype=np.float64)
        for k, table in enumerate(self.encoding.tables):
            total += table.aoi[self.local_indices[:, k]]
        return total / self.encoding.num_sources

    def dense_index(self, joint_ids: np.ndarray) -> np.ndarray:
        """Dense indices of encoded states, ``-1`` where a state is not in the space."""
        pos = np.searchsorted(self._sorted, joint_ids).clip(max=len(self) - 1)
        found = self._sorted[pos] == joint_ids
        return np.where(found, self._order[pos], -1)

    def index_of(self, state: SystemState) -> int:
        """
        Dense index of ``state``.

        :raises PolicyLookupError: If the state is not in the space.
        """
        joint = self.encoding.encode_state(state)
        index = int(self.dense_index(np.array([joint], dtype=np.int64))[0])
        if index < 0:
            raise PolicyLookupError(f'State {state} is not in the enumerated state space')
        return index

    def transitions(self) -> TransitionModel:
        """Sparse per-action transition matrices, built on first use."""
        if self._transitions is None:
            self._transitions = self._build_transitions()
        return self._transitions

    def _build_transitions(self) -> TransitionModel:
        size = len(self)
        matrices = []
        feasible = np.zeros((self.num_actions, size), dtype=bool)
        for code in range(self.num_actions):
            rows, cols, data = [], [], []
            for start, chunk in _chunks(self.ids):
                succ, prob, feas = self.encoding.successors(chunk, code)
                feasible[code, start : start + chunk.shape[0]] = feas
                mask = prob > 0.0
                row_index = np.broadcast_to(np.arange(start, start + chunk.shape[0])[:, None], succ.shape)
                cols_chunk = self.dense_index(succ[mask])
                if np.any(cols_chunk < 0):
                    raise RuntimeError('State space is not closed under the transition kernel')
                rows.append(row_index[mask])
                cols.append(cols_chunk)
                data.append(prob[mask])
            matrix = sparse.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(size, size),
            ).tocsr()
            matrices.append(matrix)
        costs = np.ones(self.num_actions, dtype=np.float64)
        costs[0] = 0.0
        logger.debug('Built transition model: %d states, %d nonzeros', size, sum(m.nnz for m in matrices))
        return TransitionModel(tuple(matrices), feasible, costs)


def enumerate_states(cfg: SystemConfig, max_states: int = SolverConfig().max_states) -> StateSpace:
    """
    Breadth-first closure of the all-zero state over all feasible actions.

    :raises StateSpaceTooLargeError: If more than ``max_states`` states are found.
    """
    tables = tuple(build_local_table(k, cfg) for k in range(cfg.num_sources))
    encoding = JointEncoding(tables)
    start = np.zeros(1, dtype=np.int64)
    levels = [start]
    seen = start
    frontier = start
    total = 1
    while frontier.size:
        found = []
        for _, chunk in _chunks(frontier):
            for code in range(num_action_codes(cfg.num_sources)):
                succ, prob, _ = encoding.successors(chunk, code)
                found.append(np.unique(succ[prob > 0.0]))
        candidates = np.unique(np.concatenate(found))
        frontier = candidates[~np.isin(candidates, seen, assume_unique=True)]
        if not frontier.size:
            break
        total += int(frontier.size)
        if total > max_states:
            raise StateSpaceTooLargeError(total, max_states)
        levels.append(frontier)
        seen = np.union1d(seen, frontier)
    ids = np.concatenate(levels)
    logger.info('Enumerated %d reachable states (%d BFS levels)', ids.size, len(levels))
    return StateSpace(cfg, encoding, ids)


def lagrangian_cost(state: SystemState, action: Action, beta: float) -> float:
    """``c(a) + beta * d(s)``: transmission indicator plus weighted average AoI."""
    return float(action.is_transmission) + beta * avg_aoi(state)


@dataclass(frozen=True)
class RviaResult:
    h: np.ndarray
    v: np.ndarray
    policy: np.ndarray
    avg_lagrangian: float
    beta: float
    iterations: int
    residual: float


def q_values(space: StateSpace, h: np.ndarray, beta: float, aperiodicity: float = 1.0) -> np.ndarray:
    """``L(s,a,beta) + sum_s' P(s'|s,a) h(s')`` for every action code, ``inf`` where infeasible."""
    model = space.transitions()
    stage = beta * space.avg_aoi
    values = np.empty((model.num_actions, len(space)), dtype=np.float64)
    for code, matrix in enumerate(model.matrices):
        expected = matrix @ h
        if aperiodicity < 1.0:
            expected = aperiodicity * expected + (1.0 - aperiodicity) * h
        values[code] = model.costs[code] + stage + expected
    values[~model.feasible] = np.inf
    return values


def rvia(
    space: StateSpace,
    beta: float,
    eps: float = SolverConfig().rvi_tol,
    max_iterations: int = SolverConfig().max_rvi_iterations,
    aperiodicity: float = 1.0,
) -> RviaResult:
    """
    Relative value iteration for the Lagrangian cost with multiplier ``beta``.

    Starts from ``h^0 = 1``, ``h^1 = 0`` and iterates synchronously until
    ``max|h^i - h^(i-1)| < eps``. Ties in the policy go to the lowest action code.

    :raises ConvergenceError: If ``max_iterations`` is reached first.
    """
    ref = space.reference_index
    h_prev = np.ones(len(space))
    h = np.zeros(len(space))
    iterations = 0
    residual = float(np.max(np.abs(h - h_prev)))
    while residual >= eps:
        if iterations >= max_iterations:
            raise ConvergenceError('Relative value iteration', residual, iterations)
        v = q_values(space, h, beta, aperiodicity).min(axis=0)
        h_prev, h = h, v - v[ref]
        residual = float(np.max(np.abs(h - h_prev)))
        iterations += 1
    values = q_values(space, h, beta, aperiodicity)
    policy = values.argmin(axis=0)
    v = values.min(axis=0)
    logger.debug('RVIA beta=%.6g converged in %d iterations, gain %.6f', beta, iterations, v[ref])
    return RviaResult(
        h=h,
        v=v,
        policy=policy,
        avg_lagrangian=float(v[ref]),
        beta=beta,
        iterations=iterations,
        residual=residual,
    )


def bellman_residual(space: StateSpace, result: RviaResult, aperiodicity: float = 1.0) -> float:
    """``max_s |L(s,pi(s)) + sum P h - gain - h(s)|`` for a converged result."""
    values = q_values(space, result.h, result.beta, aperiodicity)
    chosen = values[result.policy, np.arange(len(space))]
    return float(np.max(np.abs(chosen - result.avg_lagrangian - result.h)))


@dataclass(frozen=True)
class PolicyEvaluation:
    tau_bar: float
    delta_bar: float
    method: str
    tau_ci: float = 0.0
    delta_ci: float = 0.0


@dataclass(frozen=True)
class DeterministicPolicy:
    """Action code per state index, with the multiplier it was computed for."""

    actions: np.ndarray
    beta: float
    evaluation: PolicyEvaluation | None = None
    num_sources: int = 1

    def action_at(self, index: int) -> Action:
        return Action.from_code(int(self.actions[index]), self.num_sources)


def policy_chain(space: StateSpace, codes: np.ndarray) -> sparse.csr_matrix:
    """Transition matrix of the Markov chain induced by a policy."""
    model = space.transitions()
    index = np.arange(len(space))
    if not np.all(model.feasible[codes, index]):
        bad = int(np.flatnonzero(~model.feasible[codes, index])[0])
        raise InfeasibleActionError(
            f'Policy picks infeasible {Action.from_code(int(codes[bad]), space.cfg.num_sources)} in state {space[bad]}'
        )
    chain = sparse.csr_matrix((len(space), len(space)))
    for code, matrix in enumerate(model.matrices):
        selector = (codes == code).astype(np.float64)
        if selector.any():
            chain = chain + sparse.diags(selector) @ matrix
    return chain.tocsr()


def stationary_distribution(chain: sparse.csr_matrix, solver: SolverConfig, start: int = 0) -> np.ndarray:
    """
    Long-run state distribution of a chain started in ``start``.

    Restricted to the states reachable from ``start``; a direct sparse solve is
    used below ``solver.direct_solve_threshold`` states, lazy power iteration above
    it or when the direct system is singular.

    :raises ConvergenceError: If power iteration does not settle.
    """
    reachable = np.sort(csgraph.breadth_first_order(chain, start, directed=True, return_predecessors=False))
    sub = chain[reachable][:, reachable].tocsr()
    local_start = int(np.searchsorted(reachable, start))
    mu = None
    if sub.shape[0] <= solver.direct_solve_threshold:
        mu = _direct_stationary(sub)
    if mu is None:
        mu = _power_stationary(sub, local_start, solver)
    full = np.zeros(chain.shape[0])
    full[reachable] = mu
    return full


def _direct_stationary(sub: sparse.csr_matrix) -> np.ndarray | None:
    size = sub.shape[0]
    if size == 1:
        return np.ones(1)
    system = (sub.T - sparse.identity(size, format='csr')).tolil()
    system[size - 1, :] = np.ones(size)
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    try:
        mu = sparse_linalg.spsolve(system.tocsc(), rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(mu)) or mu.min() < -1e-9:
        logger.debug('Direct stationary solve was singular, falling back to power iteration')
        return None
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def _power_stationary(sub: sparse.csr_matrix, start: int, solver: SolverConfig) -> np.ndarray:
    mu = np.zeros(sub.shape[0])
    mu[start] = 1.0
    transposed = sub.T.tocsr()
    for iteration in range(1, solver.max_power_iterations + 1):
        updated = 0.5 * (mu + transposed @ mu)
        delta = float(np.abs(updated - mu).sum())
        mu = updated
        if delta < solver.power_iteration_tol:
            logger.debug('Power iteration converged after %d iterations', iteration)
            return mu / mu.sum()
    raise ConvergenceError('Power iteration', delta, solver.max_power_iterations)


def simulate_table(
    space: StateSpace,
    codes: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot transmission indicators and next-slot average AoI under a policy table."""
    cfg = space.cfg
    state = initial_state(cfg)
    taus = np.empty(horizon)
    aois = np.empty(horizon)
    for t in range(horizon):
        action = Action.from_code(int(codes[space.index_of(state)]), cfg.num_sources)
        outcome = step(state, action, rng, cfg)
        taus[t] = outcome.cost
        aois[t] = outcome.aoi_cost
        state = outcome.next_state
    return taus, aois


def evaluate_policy(
    space: StateSpace,
    policy: DeterministicPolicy | np.ndarray,
    solver: SolverConfig | None = None,
    mode: EvalMode = 'exact',
    horizon: int | None = None,
    seed: int | None = None,
) -> PolicyEvaluation:
    """
    Long-run average transmissions and AoI of a deterministic policy from ``s_0``.

    ``exact`` solves the induced chain; ``monte_carlo`` simulates ``horizon``
    slots and reports batch-means 95% confidence halfwidths.
    """
    solver = solver or SolverConfig()
    codes = policy.actions if isinstance(policy, DeterministicPolicy) else np.asarray(policy)
    if mode == 'exact':
        mu = stationary_distribution(policy_chain(space, codes), solver, space.reference_index)
        costs = space.transitions().costs[codes]
        return PolicyEvaluation(
            tau_bar=float(mu @ costs),
            delta_bar=float(mu @ space.avg_aoi),
            method='exact',
        )
    rng = np.random.default_rng(solver.mc_eval_seed if seed is None else seed)
    taus, aois = simulate_table(space, codes, horizon or solver.mc_eval_horizon, rng)
    return PolicyEvaluation(
        tau_bar=float(taus.mean()),
        delta_bar=float(aois.mean()),
        method='monte_carlo',
        tau_ci=batch_means_halfwidth(taus),
        delta_ci=batch_means_halfwidth(aois),
    )


@dataclass(frozen=True)
class BisectionStep:
    beta: float
    avg_lagrangian: float
    tau_bar: float
    delta_bar: float
    feasible: bool
    iterations: int
    method: str


@dataclass(frozen=True)
class SolvedPolicies:
    beta_tilde: float
    beta_lower: float
    feasible: DeterministicPolicy
    lower_bound: DeterministicPolicy
    method: str
    trace: tuple[BisectionStep, ...] = field(default=())


def bisection_solve(
    cfg: SystemConfig,
    solver: SolverConfig | None = None,
    space: StateSpace | None = None,
) -> SolvedPolicies:
    """
    Bisection over the multiplier with a beta-optimal policy per probe.

    The upper bracket is doubled until its policy meets the AoI limit (an
    infeasible upper bracket becomes the new lower bracket). The loop stops when
    ``beta_u - beta_l < bisection_tol`` and returns ``pi*_{beta_u}`` as the
    feasible policy and ``pi*_{beta_l}`` as the lower-bound policy.
    When ``pi*_0`` already meets the limit the constraint is inactive and that
    policy is returned for both.

    :raises InfeasibleConstraintError: If no multiplier up to ``beta_expansion_limit`` is feasible.
    :raises DomainError: If a positive ``beta_lower`` already meets the limit.
    """
    solver = solver or SolverConfig()
    space = space or enumerate_states(cfg, solver.max_states)
    mode: EvalMode = 'exact' if len(space) <= solver.exact_eval_threshold else 'monte_carlo'
    trace: list[BisectionStep] = []

    def probe(beta: float) -> DeterministicPolicy:
        result = rvia(space, beta, solver.rvi_tol, solver.max_rvi_iterations, solver.aperiodicity)
        evaluation = evaluate_policy(space, result.policy, solver, mode=mode)
        feasible = evaluation.delta_bar <= cfg.aoi_limit
        trace.append(
            BisectionStep(
                beta=beta,
                avg_lagrangian=result.avg_lagrangian,
                tau_bar=evaluation.tau_bar,
                delta_bar=evaluation.delta_bar,
                feasible=feasible,
                iterations=result.iterations,
                method=evaluation.method,
            )
        )
        logger.info(
            'beta=%.6g tau_bar=%.5f delta_bar=%.5f feasible=%s', beta, evaluation.tau_bar, evaluation.delta_bar, feasible
        )
        return DeterministicPolicy(result.policy, beta, evaluation, cfg.num_sources)

    beta_u = solver.beta_upper
    beta_l = solver.beta_lower
    upper = probe(beta_u)
    lower: DeterministicPolicy | None = None
    while not _meets_limit(upper, cfg):
        beta_l, lower = beta_u, upper
        if beta_u * 2.0 > solver.beta_expansion_limit:
            assert upper.evaluation is not None
            raise InfeasibleConstraintError(cfg.aoi_limit, upper.evaluation.delta_bar, beta_u)
        beta_u *= 2.0
        logger.info('Upper multiplier infeasible, expanding bracket to %.6g', beta_u)
        upper = probe(beta_u)
    if lower is None:
        lower = probe(beta_l)
        if _meets_limit(lower, cfg):
            if beta_l > 0.0:
                raise DomainError(f'beta_lower {beta_l} already meets the AoI limit; the bracket does not contain beta_tilde')
            logger.info('Constraint inactive: the beta=0 policy meets the AoI limit')
            return SolvedPolicies(
                beta_tilde=beta_l,
                beta_lower=beta_l,
                feasible=lower,
                lower_bound=lower,
                method=mode,
                trace=tuple(trace),
            )

    while beta_u - beta_l >= solver.bisection_tol:
        beta_mid = 0.5 * (beta_u + beta_l)
        candidate = probe(beta_mid)
        if _meets_limit(candidate, cfg):
            beta_u, upper = beta_mid, candidate
        else:
            beta_l, lower = beta_mid, candidate

    return SolvedPolicies(
        beta_tilde=beta_u,
        beta_lower=beta_l,
        feasible=upper,
        lower_bound=lower,
        method=mode,
        trace=tuple(trace),
    )


def _meets_limit(policy: DeterministicPolicy, cfg: SystemConfig) -> bool:
    return policy.evaluation is not None and policy.evaluation.delta_bar <= cfg.aoi_limit
