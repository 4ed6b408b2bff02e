"""Daily volatilities, stationary correlations and per-day moment reconstruction.

Second moments are uncentered throughout. Volatilities are estimated day by
day; the correlation structure is assumed stable and averaged over all days
of a sample, then recombined with each day's volatilities:

    Sigma_k = diag(sigma_k) rho_dp  diag(sigma_k)
    Omega_k = diag(omega_k) rho_q   diag(omega_k)
    R_k     = diag(sigma_k) rho_dpq diag(omega_k)
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .ingest import BinnedPanel

logger = logging.getLogger(__name__)

PSD_TOL = 1e-8
PSD_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class DailyVols:
    """Per-day RMS of price increments (``sigma_hat``) and flows (``omega_hat``)."""

    days: np.ndarray
    sigma_hat: np.ndarray  # (K, n)
    omega_hat: np.ndarray  # (K, n)
    excluded_days: tuple[int, ...] = ()

    @property
    def sigma_bar(self) -> np.ndarray:
        return self.sigma_hat.mean(axis=0)

    @property
    def omega_bar(self) -> np.ndarray:
        return self.omega_hat.mean(axis=0)

    def index(self, day: int) -> int:
        k = int(np.searchsorted(self.days, day))
        if k >= len(self.days) or self.days[k] != day:
            raise KeyError(f"day {day} not in volatility sample")
        return k

    def lagged(self, first: "DailyVols | None" = None) -> "DailyVols":
        """Vols shifted by one day: day k uses day k-1's estimate.

        The first day borrows the last day of ``first`` (e.g. the training
        sample) or, without it, keeps its own estimate.
        """
        sig = np.roll(self.sigma_hat, 1, axis=0)
        om = np.roll(self.omega_hat, 1, axis=0)
        if len(self.days):
            src = first if first is not None and len(first.days) else self
            k = -1 if src is first else 0
            sig[0], om[0] = src.sigma_hat[k], src.omega_hat[k]
        return DailyVols(self.days, sig, om, self.excluded_days)


@dataclass(frozen=True, eq=False)
class StationaryCorrelations:
    rho_dp: np.ndarray
    rho_q: np.ndarray
    rho_dpq: np.ndarray
    n_days: int = 0


@dataclass(frozen=True, eq=False)
class MomentEntry:
    Sigma: np.ndarray
    Omega: np.ndarray
    R: np.ndarray


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Per-day ``(Sigma, Omega, R)`` stacked along the first axis."""

    days: np.ndarray
    Sigma: np.ndarray
    Omega: np.ndarray
    R: np.ndarray
    sigma_hat: np.ndarray | None = field(default=None, repr=False)
    omega_hat: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.days)

    def entry(self, day: int) -> MomentEntry:
        k = int(np.searchsorted(self.days, day))
        if k >= len(self.days) or self.days[k] != day:
            raise KeyError(f"day {day} not in moment set")
        return MomentEntry(self.Sigma[k], self.Omega[k], self.R[k])

    @classmethod
    def pooled(cls, panel: BinnedPanel) -> "MomentSet":
        """Plain sample moments of the whole panel, repeated for every day."""
        S, O, R = sample_moments(panel)
        days = panel.days
        k = len(days)
        return cls(days, np.repeat(S[None], k, 0), np.repeat(O[None], k, 0), np.repeat(R[None], k, 0))

    def to_records(self) -> list[dict]:
        recs = []
        for k, d in enumerate(self.days):
            rec = {"day": int(d)}
            if self.sigma_hat is not None:
                rec["sigma_hat"] = self.sigma_hat[k].tolist()
                rec["omega_hat"] = self.omega_hat[k].tolist()
            else:
                rec["sigma_hat"] = np.sqrt(np.diag(self.Sigma[k])).tolist()
                rec["omega_hat"] = np.sqrt(np.diag(self.Omega[k])).tolist()
            rec.update(Sigma=self.Sigma[k].tolist(), Omega=self.Omega[k].tolist(), R=self.R[k].tolist())
            recs.append(rec)
        return recs

    def to_json(self) -> str:
        return json.dumps(self.to_records())


def _rms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(x * x, axis=0))


def daily_vols(panel: BinnedPanel) -> DailyVols:
    """Uncentered RMS of increments and flows for each day with at least two bins."""
    days, sig, om, skipped = [], [], [], []
    for d, sl in panel.day_slices().items():
        if sl.stop - sl.start < 2:
            skipped.append(d)
            continue
        days.append(d)
        sig.append(_rms(panel.delta_p[sl]))
        om.append(_rms(panel.q[sl]))
    if skipped:
        logger.warning("excluded %d day(s) with fewer than 2 bins: %s", len(skipped), skipped[:10])
    n = panel.n_assets
    return DailyVols(np.asarray(days, dtype=np.int64),
                     np.asarray(sig, dtype=float).reshape(-1, n),
                     np.asarray(om, dtype=float).reshape(-1, n),
                     tuple(skipped))


def _normalized_average(a: np.ndarray, b: np.ndarray, sa: np.ndarray, sb: np.ndarray,
                        slices: list[slice]) -> np.ndarray:
    """Average over days of ``<a_i b_j> / (sa_i sb_j)``, skipping zero-vol day-asset pairs."""
    n = a.shape[1]
    total = np.zeros((n, n))
    count = np.zeros((n, n))
    for k, sl in enumerate(slices):
        m = a[sl].T @ b[sl] / (sl.stop - sl.start)
        ok = np.outer(sa[k] > 0, sb[k] > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = m / np.outer(sa[k], sb[k])
        total += np.where(ok, r, 0.0)
        count += ok
    if np.any(count == 0):
        logger.warning("%d correlation entries have no usable day; set to 0", int(np.sum(count == 0)))
    with np.errstate(invalid="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return np.clip(out, -1.0, 1.0)


def repair_psd(rho: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Clip a correlation matrix back to PSD if its spectrum dips below ``-tol``.

    Eigenvalues are floored at ``1e-10 * lambda_max`` and the result is
    rescaled to unit diagonal. Matrices already within tolerance are returned
    unchanged, which makes the repair idempotent.
    """
    rho = 0.5 * (rho + rho.T)
    w, V = np.linalg.eigh(rho)
    if w.size == 0 or w[0] >= -tol:
        return rho
    w = np.maximum(w, PSD_FLOOR * w[-1])
    fixed = (V * w) @ V.T
    fixed = 0.5 * (fixed + fixed.T)
    d = 1.0 / np.sqrt(np.diag(fixed))
    fixed = fixed * np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return fixed


def stationary_correlations(panel: BinnedPanel, vols: DailyVols) -> StationaryCorrelations:
    """Average of the vol-normalized daily second moments over the whole sample."""
    slices_all = panel.day_slices()
    slices = [slices_all[int(d)] for d in vols.days]
    dp, q = panel.delta_p, panel.q
    rho_dp = _normalized_average(dp, dp, vols.sigma_hat, vols.sigma_hat, slices)
    rho_q = _normalized_average(q, q, vols.omega_hat, vols.omega_hat, slices)
    rho_dpq = _normalized_average(dp, q, vols.sigma_hat, vols.omega_hat, slices)
    for r in (rho_dp, rho_q):
        np.fill_diagonal(r, 1.0)
    return StationaryCorrelations(repair_psd(rho_dp), repair_psd(rho_q), rho_dpq, len(slices))


def reconstruct_moments(vols: DailyVols, corr: StationaryCorrelations, day: int) -> MomentEntry:
    """``(Sigma, Omega, R)`` of one day from its vols and the stationary correlations."""
    k = vols.index(day)
    s, w = vols.sigma_hat[k], vols.omega_hat[k]
    return MomentEntry(
        s[:, None] * corr.rho_dp * s[None, :],
        w[:, None] * corr.rho_q * w[None, :],
        s[:, None] * corr.rho_dpq * w[None, :],
    )


def reconstruct_all(vols: DailyVols, corr: StationaryCorrelations) -> MomentSet:
    s, w = vols.sigma_hat, vols.omega_hat
    return MomentSet(
        vols.days,
        s[:, :, None] * corr.rho_dp[None] * s[:, None, :],
        w[:, :, None] * corr.rho_q[None] * w[:, None, :],
        s[:, :, None] * corr.rho_dpq[None] * w[:, None, :],
        sigma_hat=s, omega_hat=w,
    )


def sample_moments(panel: BinnedPanel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uncentered sample second moments ``(Sigma, Omega, R)`` over all bins."""
    n_bins = panel.n_bins
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    dp, q = panel.delta_p, panel.q
    return dp.T @ dp / n_bins, q.T @ q / n_bins, dp.T @ q / n_bins


def correlations_to_csv(corr: StationaryCorrelations, prefix, symbols) -> list:
    """Write the three correlation matrices as ``<prefix>_{dp,q,dpq}.csv``."""
    paths = []
    for name, mat in (("rho_dp", corr.rho_dp), ("rho_q", corr.rho_q), ("rho_dpq", corr.rho_dpq)):
        path = f"{prefix}_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["", *symbols])
            for s, row in zip(symbols, mat):
                w.writerow([s, *(repr(float(x)) for x in row)])
        paths.append(path)
    return paths
