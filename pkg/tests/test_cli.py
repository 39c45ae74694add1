import csv
import os
from collections.abc import Iterator
from pathlib import Path

import pytest
import yaml

from harqage.cli import EXIT_CONVERGENCE, EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, MANIFEST_NAME, main

SMALL = [
    '--set', 'num_random_sources=0',
    '--set', 'num_gaw_sources=1',
    '--set', 'max_attempts=2',
    '--set', 'aoi_cap=5',
    '--set', 'aoi_limit=2.5',
]  # fmt: skip


@pytest.fixture(autouse=True)
def no_harqage_env(monkeypatch: pytest.MonkeyPatch) -> Iterator[None]:
    for key in [key for key in os.environ if key.startswith('HARQAGE_')]:
        monkeypatch.delenv(key)
    yield


def test_solve_cmdp_writes_policies_and_manifest(tmp_path: Path) -> None:
    code = main(['solve-cmdp', *SMALL, '--out', str(tmp_path), '-q'])
    assert code == EXIT_OK
    for name in ('policy-feasible.csv', 'policy-lower.csv', 'states.csv', 'bisection.csv', 'summary.yaml', 'config.yaml'):
        assert (tmp_path / name).exists(), f'{name} should be written'

    manifest = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['command'] == 'solve-cmdp'
    assert manifest['config']['aoi_limit'] == 2.5
    assert len(manifest['config_hash']) == 16
    assert manifest['sources'] == ['env:HARQAGE_*', 'overrides']
    summary = yaml.safe_load((tmp_path / 'summary.yaml').read_text(encoding='utf-8'))
    assert summary['feasible']['delta_bar'] <= 2.5
    assert summary['lower_bound']['tau_bar'] <= summary['feasible']['tau_bar']


def test_eval_policy_uses_solved_table(tmp_path: Path) -> None:
    solved = tmp_path / 'solved'
    assert main(['solve-cmdp', *SMALL, '--out', str(solved), '-q']) == EXIT_OK
    out = tmp_path / 'eval'
    code = main(
        ['eval-policy', *SMALL, '--controller', 'cmdp', '--policy', str(solved), '--horizon', '2000', '--out', str(out), '-q']
    )
    assert code == EXIT_OK
    with open(out / 'metrics.csv', encoding='utf-8') as handle:
        rows = list(csv.DictReader(handle))
    assert rows[-1]['row_type'] == 'aggregate'
    assert rows[-1]['controller'] == 'cmdp'
    assert int(rows[-1]['seeds']) == 10


def test_eval_policy_rejects_reordered_states(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    solved = tmp_path / 'solved'
    assert main(['solve-cmdp', *SMALL, '--out', str(solved), '-q']) == EXIT_OK
    states = solved / 'states.csv'
    header, first, second, *rest = states.read_text(encoding='utf-8').splitlines()
    swapped = [f'0,{second.split(",", 1)[1]}', f'1,{first.split(",", 1)[1]}']
    states.write_text('\n'.join([header, *swapped, *rest]) + '\n', encoding='utf-8')

    args = ['eval-policy', *SMALL, '--controller', 'cmdp', '--policy', str(solved), '--horizon', '500']
    assert main([*args, '--out', str(tmp_path / 'eval'), '-q']) == EXIT_USAGE
    assert 'Policy state 0' in capsys.readouterr().err


def test_eval_policy_needs_table(tmp_path: Path) -> None:
    assert main(['eval-policy', *SMALL, '--controller', 'cmdp', '--out', str(tmp_path), '-q']) == EXIT_USAGE


def test_run_lcdt(tmp_path: Path) -> None:
    assert main(['run-lcdt', *SMALL, '--horizon', '300', '--seed', '4', '--out', str(tmp_path), '-q']) == EXIT_OK
    lines = (tmp_path / 'lcdt-trace.csv').read_text(encoding='utf-8').splitlines()
    assert len(lines) == 301
    manifest = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['seeds'] == [4]
    assert manifest['train_seed'] == 4


def test_train_then_evaluate_dql(tmp_path: Path) -> None:
    trained = tmp_path / 'trained'
    training = ['--set', 'episodes=2', '--set', 'steps_per_episode=50', '--set', 'batch_size=8', '--set', 'warmup_steps=8', '--set', 'hidden_sizes=[8]']
    assert main(['train-dql', *SMALL, *training, '--out', str(trained), '-q']) == EXIT_OK
    assert (trained / 'qnet.bin').exists()
    assert len((trained / 'learning-curve.csv').read_text(encoding='utf-8').splitlines()) == 3

    out = tmp_path / 'eval'
    code = main(['eval-policy', *SMALL, '--controller', 'dql', '--policy', str(trained), '--horizon', '200', '--seed', '1', '--out', str(out), '-q'])
    assert code == EXIT_OK


def test_sweep_from_flags(tmp_path: Path) -> None:
    sweep = ['--set', 'sweep_parameter=dpp_weight', '--set', 'sweep_values=5,50', '--controller', 'lcdt', '--controller', 'idle']
    assert main(['sweep', *SMALL, *sweep, '--horizon', '200', '--set', 'seeds=0,1', '--out', str(tmp_path), '-q']) == EXIT_OK
    with open(tmp_path / 'sweep.csv', encoding='utf-8') as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 2 * 2 * 3
    assert {row['controller'] for row in rows} == {'lcdt', 'idle'}


def test_sweep_without_values(tmp_path: Path) -> None:
    assert main(['sweep', *SMALL, '--out', str(tmp_path), '-q']) == EXIT_USAGE


def test_preset_is_overridden_by_flags(tmp_path: Path) -> None:
    code = main(['sweep', '--preset', 'penalty-weight', '--set', 'sweep_values=30', '--horizon', '100', '--seed', '0', '--out', str(tmp_path), '-q'])
    assert code == EXIT_OK
    manifest = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['config']['aoi_cap'] == 18
    assert manifest['config']['sweep_values'] == 30


def test_verify(tmp_path: Path) -> None:
    assert main(['verify', '--samples', '200', '--out', str(tmp_path), '-q']) == EXIT_OK
    lines = (tmp_path / 'verify.txt').read_text(encoding='utf-8').splitlines()
    assert len(lines) == 4
    assert all(line.startswith('PASS') for line in lines)


@pytest.mark.parametrize(
    'argv',
    [
        ['solve-cmdp', '--bogus'],
        ['frobnicate'],
        ['solve-cmdp', '--set', 'aoi_lmit=3'],
        ['solve-cmdp', '--set', 'aoi_limit'],
        ['solve-cmdp', '--set', 'aoi_limit=50'],
        ['solve-cmdp', '--config', 'tests/config/absent.yaml'],
        ['solve-cmdp', '--set', 'max_states=3'],
    ],
)
def test_usage_and_configuration_errors(tmp_path: Path, argv: list[str]) -> None:
    assert main([*argv, '--out', str(tmp_path), '-q']) == EXIT_USAGE


def test_unreachable_limit_exit_code(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    argv = ['solve-cmdp', *SMALL, '--set', 'aoi_limit=0.5', '--set', 'beta_expansion_limit=64', '--out', str(tmp_path), '-q']
    assert main(argv) == EXIT_INFEASIBLE
    assert 'aoi_limit=0.5' in capsys.readouterr().err


def test_non_convergence_exit_code(tmp_path: Path) -> None:
    argv = ['solve-cmdp', *SMALL, '--set', 'max_rvi_iterations=1', '--set', 'rvi_tol=1e-12', '--out', str(tmp_path), '-q']
    assert main(argv) == EXIT_CONVERGENCE
