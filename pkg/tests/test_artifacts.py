from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from harqage.artifacts import (
    CHECKPOINT_MAGIC,
    POLICY_MAGIC,
    load_checkpoint,
    load_policy,
    load_states,
    save_checkpoint,
    save_policy,
    save_states,
)
from harqage.cmdp import DeterministicPolicy, PolicyEvaluation, enumerate_states, rvia
from harqage.config.models import SystemConfig
from harqage.dql import QNetwork
from harqage.errors import ArtifactFormatError


def test_policy_table_round_trip(tmp_path: Path, gaw_config: SystemConfig) -> None:
    space = enumerate_states(gaw_config)
    evaluation = PolicyEvaluation(tau_bar=0.25, delta_bar=2.75, method='exact')
    policy = DeterministicPolicy(rvia(space, 0.8).policy, 0.8, evaluation, num_sources=1)
    path = tmp_path / 'policy-feasible.csv'
    save_policy(path, policy, gaw_config.fingerprint())

    assert path.read_text(encoding='utf-8').splitlines()[0] == POLICY_MAGIC
    table = load_policy(path)
    assert np.array_equal(table.actions, policy.actions)
    assert table.config_hash == gaw_config.fingerprint()
    assert table.beta == 0.8
    assert table.evaluation.tau_bar == 0.25
    assert table.evaluation.method == 'exact'
    assert table.to_policy(1).action_at(0) == policy.action_at(0)


def test_policy_table_without_evaluation(tmp_path: Path) -> None:
    path = tmp_path / 'policy.csv'
    save_policy(path, DeterministicPolicy(np.array([0, 1, 0]), 0.0, num_sources=1), 'abc')
    table = load_policy(path)
    assert np.isnan(table.evaluation.tau_bar)
    assert table.evaluation.method == 'none'


@pytest.mark.parametrize(
    ('text', 'message'),
    [
        ('index,action_code\n0,1\n', 'not a harqage policy table'),
        (f'{POLICY_MAGIC}\n# beta=1.0\nindex,action_code\n', 'header lacks'),
        (
            f'{POLICY_MAGIC}\n# config_hash=x\n# beta=1\n# tau_bar=0\n# delta_bar=1\n# method=exact\n'
            '# num_states=2\nindex,action_code\n0,1\n',
            'announces 2 states',
        ),
        (
            f'{POLICY_MAGIC}\n# config_hash=x\n# beta=1\n# tau_bar=0\n# delta_bar=1\n# method=exact\n'
            '# num_states=1\nindex,action_code\n3,1\n',
            'malformed row',
        ),
    ],
)
def test_policy_table_format_errors(tmp_path: Path, text: str, message: str) -> None:
    path = tmp_path / 'broken.csv'
    path.write_text(text, encoding='utf-8')
    with pytest.raises(ArtifactFormatError, match=message):
        load_policy(path)


def test_states_file(tmp_path: Path, desk_config: SystemConfig) -> None:
    space = enumerate_states(desk_config.with_updates(aoi_cap=5, aoi_limit=3.0))
    path = tmp_path / 'states.csv'
    save_states(path, space)
    rows = load_states(path)
    assert len(rows) == len(space)
    assert rows[0] == (0,) * 8
    assert rows[-1] == tuple(value for source in space[len(space) - 1] for value in source)


def test_checkpoint_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    network = QNetwork.initialise((9, 16, 8, 5), rng)
    path = tmp_path / 'qnet.bin'
    save_checkpoint(path, network)
    restored = load_checkpoint(path)
    assert restored.sizes == (9, 16, 8, 5)
    for a, b in zip(network.parameters(), restored.parameters()):
        assert np.array_equal(a, b)
    features = rng.random((4, 9))
    assert np.array_equal(network.forward(features), restored.forward(features))


def test_checkpoint_rejects_bad_files(tmp_path: Path, rng: np.random.Generator) -> None:
    path = tmp_path / 'qnet.bin'
    save_checkpoint(path, QNetwork.initialise((3, 4, 2), rng))
    data = path.read_bytes()

    path.write_bytes(b'NOTAQNET' + data[len(CHECKPOINT_MAGIC) :])
    with pytest.raises(ArtifactFormatError, match='not a harqage checkpoint'):
        load_checkpoint(path)

    path.write_bytes(data[:-8])
    with pytest.raises(ArtifactFormatError, match='expected'):
        load_checkpoint(path)

    path.write_bytes(data[: len(CHECKPOINT_MAGIC) + 4])
    with pytest.raises(ArtifactFormatError, match='truncated'):
        load_checkpoint(path)

    path.write_bytes(data[: len(CHECKPOINT_MAGIC)] + (2).to_bytes(4, 'little') + data[len(CHECKPOINT_MAGIC) + 4 :])
    with pytest.raises(ArtifactFormatError, match='version 2'):
        load_checkpoint(path)
