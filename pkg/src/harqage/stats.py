"""Confidence intervals for simulation output."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy import stats

CONFIDENCE = 0.95
DEFAULT_BATCHES = 20


def t_halfwidth(values: Sequence[float] | np.ndarray, confidence: float = CONFIDENCE) -> float:
    """Student-t confidence halfwidth of the mean of independent ``values``; ``nan`` below two values."""
    data = np.asarray(values, dtype=float)
    if data.size < 2:
        return float('nan')
    quantile = stats.t.ppf(0.5 + confidence / 2.0, df=data.size - 1)
    return float(quantile * data.std(ddof=1) / np.sqrt(data.size))


def batch_means_halfwidth(
    series: Sequence[float] | np.ndarray,
    batches: int = DEFAULT_BATCHES,
    confidence: float = CONFIDENCE,
) -> float:
    """Halfwidth for the time average of one correlated series, by non-overlapping batch means."""
    data = np.asarray(series, dtype=float)
    batches = min(batches, data.size)
    if batches < 2:
        return float('nan')
    usable = data.size - data.size % batches
    means = data[:usable].reshape(batches, -1).mean(axis=1)
    return t_halfwidth(means, confidence)


def running_mean(series: Sequence[float] | np.ndarray) -> np.ndarray:
    """``(1/t) * sum_{i<=t} x_i`` for every prefix."""
    data = np.asarray(series, dtype=float)
    return np.cumsum(data) / np.arange(1, data.size + 1)
