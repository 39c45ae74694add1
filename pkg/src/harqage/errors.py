"""Exception hierarchy.

Every error also derives from the closest builtin exception, so code that
catches ``KeyError`` or ``ValueError`` keeps working.
"""

from __future__ import annotations


class HarqAgeError(Exception):
    """Base class for all harqage errors."""


class DomainError(HarqAgeError, ValueError):
    """An argument lies outside the domain of the function."""


class InfeasibleActionError(HarqAgeError, ValueError):
    """An action was applied in a state where it is not feasible."""


class StateSpaceTooLargeError(HarqAgeError, MemoryError):
    """State enumeration exceeded the configured cap."""

    def __init__(self, reached: int, cap: int) -> None:
        super().__init__(f'State space enumeration reached {reached} states, above the cap of {cap}')
        self.reached = reached
        self.cap = cap


class ConvergenceError(HarqAgeError, ArithmeticError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, what: str, residual: float, iterations: int) -> None:
        super().__init__(f'{what} did not converge after {iterations} iterations (residual {residual:.3e})')
        self.residual = residual
        self.iterations = iterations


class InfeasibleConstraintError(HarqAgeError, RuntimeError):
    """No multiplier within the search range yields a policy meeting the AoI limit."""

    def __init__(self, aoi_limit: float, best_delta_bar: float, beta: float) -> None:
        super().__init__(
            f'Average AoI constraint {aoi_limit:g} is unreachable: best average AoI {best_delta_bar:.4f} '
            f'at beta={beta:g}'
        )
        self.aoi_limit = aoi_limit
        self.best_delta_bar = best_delta_bar
        self.beta = beta


class TrainingDivergedError(HarqAgeError, FloatingPointError):
    """The TD loss became NaN or infinite."""


class PolicyLookupError(HarqAgeError, KeyError):
    """A policy table has no entry for a visited state."""


class ConfigKeyError(HarqAgeError, KeyError):
    """Configuration contains a key no model accepts."""

    def __init__(self, unknown: list[str], valid: list[str]) -> None:
        super().__init__(f"Unknown configuration key(s) {', '.join(sorted(unknown))}; valid keys: {', '.join(sorted(valid))}")
        self.unknown = unknown
        self.valid = valid


class ArtifactFormatError(HarqAgeError, ValueError):
    """A policy table or checkpoint file is malformed."""
