"""
Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 unreachable AoI
constraint, 3 solver non-convergence or training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import yaml
from pydantic import ValidationError

from harqage import __version__, artifacts
from harqage.cmdp import StateSpace, bisection_solve, enumerate_states
from harqage.config.models import CONTROLLER_NAMES, valid_keys
from harqage.config.settings import RunSettings, load_settings
from harqage.config.sources import MappingSource
from harqage.dql import train
from harqage.errors import (
    ArtifactFormatError,
    ConfigKeyError,
    ConvergenceError,
    HarqAgeError,
    InfeasibleConstraintError,
    PolicyLookupError,
    StateSpaceTooLargeError,
    TrainingDivergedError,
)
from harqage.evaluation import PRESETS, SweepSpec, make_factory, metric_rows, run_sweep, simulate, write_sweep_csv
from harqage.lyapunov import run_lcdt
from harqage.verify import run_all

logger = logging.getLogger('harqage')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_CONVERGENCE = 3

MANIFEST_NAME = 'run-manifest.yaml'
RESOLVED_CONFIG_NAME = 'config.yaml'


class UsageError(HarqAgeError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f'{self.prog}: {message}')


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', action='append', default=[], metavar='PATH', help='YAML or key = value file; repeatable, later wins')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', dest='assignments', help='override one key')
    parser.add_argument('--out', default='runs/latest', metavar='DIR', help='output directory')
    parser.add_argument('--seed', type=int, help='evaluation and training seed')
    parser.add_argument('--horizon', type=int, help='simulated slots per seed')
    parser.add_argument('--threads', type=int, help='worker processes (env: HARQAGE_THREADS)')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', '-v', action='store_true')
    verbosity.add_argument('--quiet', '-q', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='harqage', description='AoI-constrained transmission policies for multi-source HARQ systems')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    solve = commands.add_parser('solve-cmdp', help='enumerate states, bisect the multiplier, save both policy tables')
    _common_flags(solve)

    lcdt = commands.add_parser('run-lcdt', help='run the drift-plus-penalty controller and save the per-slot trace')
    _common_flags(lcdt)

    learn = commands.add_parser('train-dql', help='train a Q-network and save the checkpoint and learning curve')
    _common_flags(learn)

    evaluate = commands.add_parser('eval-policy', help='simulate one controller over all seeds')
    _common_flags(evaluate)
    evaluate.add_argument('--controller', choices=CONTROLLER_NAMES, default='lcdt')
    evaluate.add_argument('--policy', metavar='DIR', help='directory written by solve-cmdp or train-dql')

    sweep = commands.add_parser('sweep', help='evaluate controllers over a swept parameter')
    _common_flags(sweep)
    sweep.add_argument('--preset', choices=sorted(PRESETS), help='start from a built-in experiment preset')
    sweep.add_argument('--controller', action='append', choices=CONTROLLER_NAMES, dest='controllers')

    check = commands.add_parser('verify', help='run the closed-form and gradient oracle suites')
    _common_flags(check)
    check.add_argument('--samples', type=int, default=10_000)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def _settings(args: argparse.Namespace) -> RunSettings:
    overrides: dict[str, Any] = {}
    try:
        overrides.update(MappingSource.from_assignments(args.assignments).load())
    except ValueError as error:
        raise UsageError(str(error))
    if args.seed is not None:
        overrides['seeds'] = args.seed
        overrides['train_seed'] = args.seed
    if args.horizon is not None:
        overrides['horizon'] = args.horizon
    if args.threads is not None:
        overrides['threads'] = args.threads
    if getattr(args, 'controllers', None):
        overrides['sweep_controllers'] = tuple(args.controllers)
    preset = getattr(args, 'preset', None)
    return load_settings(args.config, overrides, base=PRESETS[preset] if preset else None)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(item) for item in value]
    return value


def write_manifest(out: Path, command: str, argv: Sequence[str], settings: RunSettings) -> None:
    """Resolved flat configuration plus a manifest naming the command, its config sources and seeds."""
    config = _plain(settings.to_dict())
    (out / RESOLVED_CONFIG_NAME).write_text(yaml.safe_dump(config, sort_keys=True), encoding='utf-8')
    manifest = {
        'command': command,
        'argv': list(argv),
        'config': config,
        'config_hash': settings.system().fingerprint(),
        'seeds': list(settings.evaluation().seeds),
        'sources': settings.sources,
        'train_seed': settings.train().train_seed,
        'version': __version__,
    }
    (out / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=True), encoding='utf-8')


def _summary(out: Path, name: str, data: dict[str, Any]) -> None:
    (out / name).write_text(yaml.safe_dump(_plain(data), sort_keys=True), encoding='utf-8')


def cmd_solve_cmdp(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    cfg = settings.system()
    solver = settings.solver()
    space = enumerate_states(cfg, solver.max_states)
    solved = bisection_solve(cfg, solver, space)
    config_hash = cfg.fingerprint()
    artifacts.save_policy(out / 'policy-feasible.csv', solved.feasible, config_hash)
    artifacts.save_policy(out / 'policy-lower.csv', solved.lower_bound, config_hash)
    artifacts.save_states(out / 'states.csv', space)
    with open(out / 'bisection.csv', 'w', encoding='utf-8') as handle:
        handle.write('beta,avg_lagrangian,tau_bar,delta_bar,feasible,iterations,method\n')
        for probe in solved.trace:
            handle.write(
                f'{probe.beta!r},{probe.avg_lagrangian!r},{probe.tau_bar!r},{probe.delta_bar!r},'
                f'{str(probe.feasible).lower()},{probe.iterations},{probe.method}\n'
            )
    assert solved.feasible.evaluation is not None and solved.lower_bound.evaluation is not None
    _summary(
        out,
        'summary.yaml',
        {
            'num_states': len(space),
            'beta_tilde': solved.beta_tilde,
            'beta_lower': solved.beta_lower,
            'method': solved.method,
            'feasible': {
                'tau_bar': solved.feasible.evaluation.tau_bar,
                'delta_bar': solved.feasible.evaluation.delta_bar,
            },
            'lower_bound': {
                'tau_bar': solved.lower_bound.evaluation.tau_bar,
                'delta_bar': solved.lower_bound.evaluation.delta_bar,
            },
        },
    )
    print(
        f'feasible policy: tau_bar={solved.feasible.evaluation.tau_bar:.5f} '
        f'delta_bar={solved.feasible.evaluation.delta_bar:.4f} (beta={solved.beta_tilde:.5g}); '
        f'lower bound: tau_bar={solved.lower_bound.evaluation.tau_bar:.5f}'
    )
    return EXIT_OK


def cmd_run_lcdt(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    cfg = settings.system()
    evaluation = settings.evaluation()
    seed = evaluation.seeds[0]
    trace = run_lcdt(cfg, evaluation.horizon, np.random.default_rng([cfg.rng_seed, seed]))
    trace.write_csv(out / 'lcdt-trace.csv')
    burn_in = evaluation.burn_in_fraction
    _summary(
        out,
        'summary.yaml',
        {'seed': seed, 'tau_bar': trace.tau_bar(burn_in), 'delta_bar': trace.delta_bar(burn_in), 'final_queue': float(trace.queue[-1])},
    )
    print(f'LC-DT: tau_bar={trace.tau_bar(burn_in):.5f} delta_bar={trace.delta_bar(burn_in):.4f}')
    return EXIT_OK


def cmd_train_dql(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    cfg = settings.system()
    train_cfg = settings.train()
    result = train(cfg, train_cfg, np.random.default_rng(train_cfg.train_seed))
    artifacts.save_checkpoint(out / 'qnet.bin', result.network)
    result.write_learning_curve(out / 'learning-curve.csv')
    _summary(
        out,
        'summary.yaml',
        {'queue_scale': result.queue_scale, 'gradient_steps': result.gradient_steps, 'episodes': len(result.history)},
    )
    last = result.history[-1]
    print(f'trained {len(result.history)} episodes; last episode tau_bar={last.tau_bar:.4f} delta_bar={last.delta_bar:.4f}')
    return EXIT_OK


def _check_state_order(rows: list[tuple[int, ...]], space: StateSpace) -> None:
    """The policy rows must index the same states, in the same order, as ``space``."""
    for index, (row, state) in enumerate(zip(rows, space)):
        if row != tuple(value for source in state for value in source):
            raise UsageError(f'Policy state {index} is {row}, the configuration enumerates {state} there')
    if len(rows) != len(space):
        raise UsageError(f'states.csv has {len(rows)} states, the configuration has {len(space)}')


def cmd_eval_policy(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    cfg = settings.system()
    evaluation = settings.evaluation()
    name = args.controller
    if name in ('cmdp', 'lower_bound'):
        if not args.policy:
            raise UsageError(f"--controller {name} needs --policy DIR written by solve-cmdp")
        table = artifacts.load_policy(Path(args.policy) / ('policy-feasible.csv' if name == 'cmdp' else 'policy-lower.csv'))
        if table.config_hash != cfg.fingerprint():
            logger.warning('Policy table was solved for config %s, evaluating under %s', table.config_hash, cfg.fingerprint())
        space = enumerate_states(cfg, settings.solver().max_states)
        if len(space) != len(table.actions):
            raise UsageError(f'Policy table has {len(table.actions)} states, the configuration has {len(space)}')
        states_path = Path(args.policy) / 'states.csv'
        if states_path.exists():
            _check_state_order(artifacts.load_states(states_path), space)
        factory = make_factory(name, cfg, space=space, policy=table.to_policy(cfg.num_sources))
    elif name == 'dql':
        if not args.policy:
            raise UsageError('--controller dql needs --policy DIR written by train-dql')
        network = artifacts.load_checkpoint(Path(args.policy) / 'qnet.bin')
        factory = make_factory(name, cfg, network=network, queue_scale=settings.train().q_feature_scale)
    else:
        factory = make_factory(name, cfg)
    metrics = simulate(factory, cfg, evaluation.horizon, evaluation.seeds, evaluation.burn_in_fraction, evaluation.threads)
    spec = SweepSpec(parameter='aoi_limit', values=(cfg.aoi_limit,), controllers=(name,), system=cfg, evaluation=evaluation)
    write_sweep_csv(metric_rows(spec, cfg.aoi_limit, metrics), out / 'metrics.csv')
    print(
        f'{name}: tau_bar={metrics.tau_bar:.5f} +- {metrics.tau_ci:.5f} '
        f'delta_bar={metrics.delta_bar:.4f} +- {metrics.delta_ci:.4f} feasible={metrics.feasible}'
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    spec = SweepSpec.from_settings(settings)
    if not spec.values:
        raise UsageError('sweep needs sweep_values (in a config file, a preset or --set)')
    rows = run_sweep(spec)
    write_sweep_csv(rows, out / 'sweep.csv')
    flagged = [row for row in rows if row.status != 'ok']
    print(f'{len(rows)} rows written to {out / "sweep.csv"}; {len(flagged)} flagged')
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, settings: RunSettings, out: Path) -> int:
    seed = settings.evaluation().seeds[0]
    results = run_all(args.samples, seed)
    with open(out / 'verify.txt', 'w', encoding='utf-8') as handle:
        for result in results:
            handle.write(f'{result}\n')
            print(result)
    return EXIT_OK if all(result.passed for result in results) else EXIT_CONVERGENCE


COMMANDS: dict[str, Callable[[argparse.Namespace, RunSettings, Path], int]] = {
    'solve-cmdp': cmd_solve_cmdp,
    'run-lcdt': cmd_run_lcdt,
    'train-dql': cmd_train_dql,
    'eval-policy': cmd_eval_policy,
    'sweep': cmd_sweep,
    'verify': cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _configure_logging(args)
        settings = _settings(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, argv, settings)
        return COMMANDS[args.command](args, settings, out)
    except UsageError as error:
        print(error, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigKeyError as error:
        print(f'configuration error: {error.args[0]}', file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactFormatError, PolicyLookupError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ValueError, FileNotFoundError, yaml.YAMLError) as error:
        print(f'configuration error: {error}', file=sys.stderr)
        print(f'valid keys: {", ".join(sorted(valid_keys()))}', file=sys.stderr)
        return EXIT_USAGE
    except StateSpaceTooLargeError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleConstraintError as error:
        print(f'infeasible: {error} (binding constraint: aoi_limit={error.aoi_limit:g})', file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, TrainingDivergedError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_CONVERGENCE


def run() -> None:
    sys.exit(main())
