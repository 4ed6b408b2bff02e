"""Significance tests, multiple-testing corrections, autocorrelations and robust trends."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special, stats

P_FLOOR = 1e-300


def _clamp(p: float) -> float:
    return float(min(1.0, max(P_FLOOR, p)))


@dataclass(frozen=True)
class SignificanceReport:
    f_stat: float
    p_value: float
    robust: bool
    n: int

    def to_dict(self, **extra) -> dict:
        return {**extra, "F": self.f_stat, "p": self.p_value, "robust": self.robust, "n": self.n}


def f_from_r2(r2: float, n: int | None = None) -> float | SignificanceReport:
    """``F = R2 / (1 - R2)``.

    Without ``n`` the bare statistic is returned. With a sample size the
    result is a :class:`SignificanceReport` whose p-value is the upper tail
    of the Fisher law ``F(n, n-1)`` (the classical, non-robust reference).
    """
    r2 = float(r2)
    if r2 >= 1:
        raise ValueError("F is undefined for R2 >= 1")
    f = r2 / (1.0 - r2)
    if n is None:
        return f
    if n < 2:
        raise ValueError("need n >= 2")
    return SignificanceReport(f, _clamp(stats.f.sf(f, n, n - 1)), False, int(n))


def robust_f_pvalue(realized, predicted) -> SignificanceReport:
    """Heteroskedasticity-robust test of ``Y != 0`` in ``realized = Y * predicted + eta``.

    The regression has no intercept. The Wald statistic ``Y^2 / Var(Y)``
    uses the HC3 variance, in which each squared residual is inflated by
    ``(1 - h_t)^-2`` with ``h_t`` the leverage of bin ``t``; the p-value
    comes from ``F(1, N-1)``.
    """
    y = np.asarray(realized, dtype=float).ravel()
    x = np.asarray(predicted, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("series lengths differ")
    n = len(x)
    if n < 10:
        raise ValueError("need at least 10 observations")
    sxx = float(x @ x)
    if sxx == 0:
        raise ZeroDivisionError("predicted series is identically zero")
    beta = float(x @ y) / sxx
    e = y - beta * x
    h = x * x / sxx
    with np.errstate(divide="ignore"):
        w = np.where(h < 1, (e / (1.0 - h)) ** 2, 0.0)
    var = float(np.sum(x * x * w)) / sxx**2
    if var == 0:
        wald = math.inf if beta != 0 else 0.0
    else:
        wald = beta * beta / var
    p = 0.0 if math.isinf(wald) else float(stats.f.sf(wald, 1, n - 1))
    return SignificanceReport(wald, _clamp(p), True, n)


def bonferroni(pvalues, alpha: float = 0.05) -> np.ndarray:
    """Reject where ``p < alpha / m``."""
    p = np.asarray(pvalues, dtype=float).ravel()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    return p < alpha / p.size


def benjamini_hochberg(pvalues, alpha: float = 0.05) -> np.ndarray:
    """Step-up procedure: reject the ``k`` smallest p-values, ``k`` the largest rank with ``p_(k) <= k alpha / m``."""
    p = np.asarray(pvalues, dtype=float).ravel()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    m = p.size
    out = np.zeros(m, dtype=bool)
    if m == 0:
        return out
    order = np.argsort(p, kind="stable")
    passing = np.flatnonzero(p[order] <= alpha * np.arange(1, m + 1) / m)
    if passing.size:
        out[order[: passing[-1] + 1]] = True
    return out


@dataclass(frozen=True, eq=False)
class AcfResult:
    lags: np.ndarray
    acf: np.ndarray
    stderr: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}


def acf(series, max_lag: int) -> AcfResult:
    """Sample autocorrelations up to ``max_lag`` with the biased ``1/N`` normalization.

    Standard errors are the white-noise value ``1/sqrt(N)`` at every lag.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if n <= 4 * max_lag or n < 2:
        raise ValueError(f"need more than {4 * max_lag} observations, got {n}")
    x = x - x.mean()
    c0 = float(x @ x)
    if c0 <= 1e-300 * n:
        raise ValueError("constant series has no autocorrelation")
    vals = np.array([1.0] + [float(x[:-k] @ x[k:]) / c0 for k in range(1, max_lag + 1)])
    lags = np.arange(max_lag + 1)
    return AcfResult(lags, vals, np.full(max_lag + 1, 1.0 / math.sqrt(n)))


@dataclass(frozen=True)
class TheilSen:
    slope: float
    low: float
    high: float
    intercept: float


def _tie_term(v: np.ndarray) -> float:
    _, t = np.unique(v, return_counts=True)
    t = t[t > 1].astype(float)
    return float(np.sum(t * (t - 1) * (2 * t + 5)))


def theil_sen(x, y, confidence: float = 0.95) -> TheilSen:
    """Median of pairwise slopes with the rank-based confidence band.

    The band picks order statistics of the sorted pairwise slopes around the
    median at ``z * sd / 2`` positions, ``sd`` being the standard deviation
    of Kendall's S under independence (tie-corrected).
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    i, j = np.triu_indices(x.size, k=1)
    dx = x[j] - x[i]
    keep = dx != 0
    if not keep.any():
        raise ValueError("need at least two distinct x values")
    slopes = np.sort((y[j] - y[i])[keep] / dx[keep])
    slope = float(np.median(slopes))
    n, m = x.size, slopes.size
    z = -special.ndtri(0.5 * (1 - confidence))
    sd = math.sqrt((n * (n - 1) * (2 * n + 5) - _tie_term(x) - _tie_term(y)) / 18.0)
    lo = max(int(round((m - z * sd) / 2.0)) - 1, 0)
    hi = min(int(round((m + z * sd) / 2.0)), m - 1)
    return TheilSen(slope, float(slopes[lo]), float(slopes[hi]), float(np.median(y - slope * x)))
