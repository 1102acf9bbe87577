"""Contingency-table chi-squared test and percentile bootstrap."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["DegenerateTableError", "gamma_q", "chi2_sf", "chi_squared", "bootstrap_ci"]


class DegenerateTableError(ValueError):
    """A contingency table with an empty row or column."""


def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_fraction(a, x)


def chi2_sf(statistic: float, df: int) -> float:
    return gamma_q(df / 2.0, statistic / 2.0)


def chi_squared(table) -> tuple[float, int, float]:
    """Pearson chi-squared test of independence.

    Returns ``(statistic, df, p)`` with ``df = (rows - 1)(cols - 1)``.
    """
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise DegenerateTableError("need at least a 2x2 table")
    if np.any(obs < 0):
        raise DegenerateTableError("counts must be non-negative")
    total = obs.sum()
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / total if total else np.zeros_like(obs)
    if np.any(expected <= 0):
        raise DegenerateTableError("a row or column sums to zero, so an expected count is zero")
    stat = float(((obs - expected) ** 2 / expected).sum())
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return stat, df, chi2_sf(stat, df)


def bootstrap_ci(values, n_resamples: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    # chunked to bound memory for large samples
    chunk = max(1, 2_000_000 // x.size)
    for lo in range(0, n_resamples, chunk):
        hi = min(n_resamples, lo + chunk)
        idx = rng.integers(0, x.size, size=(hi - lo, x.size))
        means[lo:hi] = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo_q, hi_q = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo_q), float(hi_q)
