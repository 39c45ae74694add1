"""
harqage: age-of-information transmission policies for multi-source HARQ systems

This package provides:
- env: the slotted multi-source HARQ status update model.
- cmdp: state enumeration, relative value iteration and multiplier bisection.
- lyapunov: the drift-plus-penalty (LC-DT) controller.
- dql: deep Q-learning for the unknown-environment case.
- evaluation: controllers, multi-seed simulation and sweeps.

Usage example:
    import numpy as np
    from harqage import SystemConfig, run_lcdt

    cfg = SystemConfig(aoi_limit=4.0, max_attempts=3, aoi_cap=10)
    trace = run_lcdt(cfg, horizon=10_000, rng=np.random.default_rng(0))
    print(trace.tau_bar(0.1), trace.delta_bar(0.1))
"""

from importlib.metadata import PackageNotFoundError, version

from harqage.cmdp import bisection_solve, enumerate_states, evaluate_policy, rvia
from harqage.config import EvalConfig, SolverConfig, SweepConfig, SystemConfig, TrainConfig, load_settings
from harqage.env import Action, ActionKind, SourceState, feasible_actions, step, transition_kernel
from harqage.lyapunov import LcdtController, run_lcdt, select_action

try:
    __version__ = version('harqage')
except PackageNotFoundError:
    __version__ = '0.0.0+local'

__all__ = [
    'Action',
    'ActionKind',
    'EvalConfig',
    'LcdtController',
    'SolverConfig',
    'SourceState',
    'SweepConfig',
    'SystemConfig',
    'TrainConfig',
    'bisection_solve',
    'enumerate_states',
    'evaluate_policy',
    'feasible_actions',
    'load_settings',
    'run_lcdt',
    'rvia',
    'select_action',
    'step',
    'transition_kernel',
]
