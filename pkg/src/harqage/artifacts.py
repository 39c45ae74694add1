"""
On-disk formats: policy tables and Q-network checkpoints.

A policy table is a text file::

    # harqage-policy v1
    # config_hash=<16 hex chars>
    # beta=<float>
    # tau_bar=<float>
    # delta_bar=<float>
    # method=exact|monte_carlo
    # num_states=<n>
    index,action_code
    0,1
    ...

The companion states file lists ``index`` followed by the ``4K`` state
components, so a table can be checked against a state space enumerated
elsewhere.

A checkpoint is binary, little-endian: magic ``HARQQNET``, ``uint32``
version, ``uint32`` layer count ``L``, ``L + 1`` ``uint32`` layer widths, then
for every layer the row-major weight matrix and the bias vector as float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from harqage.cmdp import DeterministicPolicy, PolicyEvaluation, StateSpace
from harqage.dql import QNetwork
from harqage.errors import ArtifactFormatError

POLICY_MAGIC = '# harqage-policy v1'
STATES_MAGIC = '# harqage-states v1'
CHECKPOINT_MAGIC = b'HARQQNET'
CHECKPOINT_VERSION = 1

_HEADER_KEYS = ('config_hash', 'beta', 'tau_bar', 'delta_bar', 'method', 'num_states')


@dataclass(frozen=True)
class PolicyTable:
    actions: np.ndarray
    config_hash: str
    beta: float
    evaluation: PolicyEvaluation

    def to_policy(self, num_sources: int) -> DeterministicPolicy:
        return DeterministicPolicy(self.actions, self.beta, self.evaluation, num_sources)


def save_policy(path: str | Path, policy: DeterministicPolicy, config_hash: str) -> None:
    evaluation = policy.evaluation or PolicyEvaluation(float('nan'), float('nan'), 'none')
    lines = [
        POLICY_MAGIC,
        f'# config_hash={config_hash}',
        f'# beta={policy.beta!r}',
        f'# tau_bar={evaluation.tau_bar!r}',
        f'# delta_bar={evaluation.delta_bar!r}',
        f'# method={evaluation.method}',
        f'# num_states={len(policy.actions)}',
        'index,action_code',
    ]
    lines.extend(f'{i},{int(code)}' for i, code in enumerate(policy.actions))
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_policy(path: str | Path) -> PolicyTable:
    """
    Read a policy table.

    :raises ArtifactFormatError: On a missing magic line, header key, or a row count mismatch.
    """
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    if not lines or lines[0].strip() != POLICY_MAGIC:
        raise ArtifactFormatError(f'{path}: not a harqage policy table (expected "{POLICY_MAGIC}")')
    header: dict[str, str] = {}
    cursor = 1
    while cursor < len(lines) and lines[cursor].startswith('#'):
        key, _, value = lines[cursor][1:].strip().partition('=')
        header[key.strip()] = value.strip()
        cursor += 1
    missing = [key for key in _HEADER_KEYS if key not in header]
    if missing:
        raise ArtifactFormatError(f'{path}: header lacks {", ".join(missing)}')
    if cursor >= len(lines) or lines[cursor].strip() != 'index,action_code':
        raise ArtifactFormatError(f'{path}: missing "index,action_code" column line')
    rows = [line.split(',') for line in lines[cursor + 1 :] if line.strip()]
    num_states = int(header['num_states'])
    if len(rows) != num_states:
        raise ArtifactFormatError(f'{path}: header announces {num_states} states, found {len(rows)} rows')
    actions = np.empty(num_states, dtype=np.int64)
    for expected, row in enumerate(rows):
        if len(row) != 2 or int(row[0]) != expected:
            raise ArtifactFormatError(f'{path}: malformed row {expected}: {",".join(row)}')
        actions[expected] = int(row[1])
    evaluation = PolicyEvaluation(
        tau_bar=float(header['tau_bar']),
        delta_bar=float(header['delta_bar']),
        method=header['method'],
    )
    return PolicyTable(actions, header['config_hash'], float(header['beta']), evaluation)


def save_states(path: str | Path, space: StateSpace) -> None:
    lines = [STATES_MAGIC]
    for index, state in enumerate(space):
        components = ','.join(str(value) for source in state for value in source)
        lines.append(f'{index},{components}')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_states(path: str | Path) -> list[tuple[int, ...]]:
    """Flat state rows (``4K`` integers each) in index order."""
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    if not lines or lines[0].strip() != STATES_MAGIC:
        raise ArtifactFormatError(f'{path}: not a harqage states file (expected "{STATES_MAGIC}")')
    states = []
    for expected, line in enumerate(lines[1:]):
        index, *values = (int(part) for part in line.split(','))
        if index != expected or len(values) % 4:
            raise ArtifactFormatError(f'{path}: malformed state row {expected}')
        states.append(tuple(values))
    return states


def save_checkpoint(path: str | Path, network: QNetwork) -> None:
    sizes = network.sizes
    with open(path, 'wb') as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack('<II', CHECKPOINT_VERSION, len(network.weights)))
        handle.write(struct.pack(f'<{len(sizes)}I', *sizes))
        for weights, biases in zip(network.weights, network.biases):
            handle.write(np.ascontiguousarray(weights, dtype='<f8').tobytes())
            handle.write(np.ascontiguousarray(biases, dtype='<f8').tobytes())


def load_checkpoint(path: str | Path) -> QNetwork:
    """
    Read a Q-network checkpoint.

    :raises ArtifactFormatError: On a wrong magic, an unknown version or a truncated body.
    """
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(f'{path}: not a harqage checkpoint')
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, layers = struct.unpack_from('<II', data, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise ArtifactFormatError(f'{path}: unsupported checkpoint version {version}')
        sizes = struct.unpack_from(f'<{layers + 1}I', data, offset)
        offset += 4 * (layers + 1)
    except struct.error:
        raise ArtifactFormatError(f'{path}: truncated checkpoint header')
    expected = offset + 8 * sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(sizes, sizes[1:]))
    if len(data) != expected:
        raise ArtifactFormatError(f'{path}: expected {expected} bytes, found {len(data)}')
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(np.frombuffer(data, dtype='<f8', count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out))
        offset += 8 * fan_in * fan_out
        biases.append(np.frombuffer(data, dtype='<f8', count=fan_out, offset=offset))
        offset += 8 * fan_out
    return QNetwork(weights, biases)
