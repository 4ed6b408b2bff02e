"""Goodness-of-fit metrics, bin-size scans and pair selection."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import BinnedPanel, TickData, TradingCalendar, bin_ticks, trading_frequency
from .models import (ImpactMatrix, ModelKind, SingularFlowCovariance, build_lambda, calibrate_y, daily_lambdas,
                     matrix_sqrt, predict, regularized_inverse)
from .moments import (DailyVols, MomentSet, daily_vols, reconstruct_all, stationary_correlations)

logger = logging.getLogger(__name__)

DEFAULT_TAU_GRID = tuple(float(x) for x in np.logspace(0, np.log10(3600.0), 24))
REFERENCE_TAU = 300.0
MIN_EVAL_BINS = 100


@dataclass(frozen=True)
class WeightSpec:
    """Choice of the error weighting matrix ``M``.

    ``basket``: ``diag(<sigma^2>)^-1``; ``asset`` (with ``asset=i``): the
    same restricted to asset ``i``; ``invcov``: ``<Sigma>^-1``. Averages run
    over the days of the moment set the matrix is realized on.
    """

    kind: str = "basket"
    asset: int | None = None

    def __post_init__(self):
        if self.kind not in ("basket", "asset", "invcov"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if (self.kind == "asset") != (self.asset is not None):
            raise ValueError("an asset index is required for, and only for, kind='asset'")

    @classmethod
    def parse(cls, text: "str | WeightSpec") -> "WeightSpec":
        if isinstance(text, WeightSpec):
            return text
        t = str(text).strip().lower()
        if t.startswith("asset:"):
            return cls("asset", int(t.split(":", 1)[1]))
        return cls({"full": "basket", "inverse_covariance": "invcov"}.get(t, t))

    def __str__(self) -> str:
        return f"asset:{self.asset}" if self.kind == "asset" else self.kind

    def matrix(self, moments: MomentSet) -> np.ndarray:
        sig2 = np.mean(np.diagonal(moments.Sigma, axis1=1, axis2=2), axis=0)
        if self.kind == "invcov":
            return regularized_inverse(np.mean(moments.Sigma, axis=0))
        if self.kind == "asset":
            i = self.asset
            if not 0 <= i < len(sig2):
                raise IndexError(f"weight asset {i} out of range")
            if not sig2[i] > 0:
                raise ZeroDivisionError(f"asset {i} has zero price variance")
            M = np.zeros((len(sig2), len(sig2)))
            M[i, i] = 1.0 / sig2[i]
            return M
        if np.any(sig2 <= 0):
            raise ZeroDivisionError("zero price variance in the basket")
        return np.diag(1.0 / sig2)


def generalized_r2(dp, dp_hat, M) -> float:
    """``1 - sum e'Me / sum dp'M dp`` with ``e = dp - dp_hat``; negative values are kept."""
    dp = np.atleast_2d(np.asarray(dp, dtype=float).T).T
    dp_hat = np.atleast_2d(np.asarray(dp_hat, dtype=float).T).T
    if dp.shape != dp_hat.shape:
        raise ValueError(f"shape mismatch {dp.shape} vs {dp_hat.shape}")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    err = dp - dp_hat
    den = float(np.einsum("ti,ij,tj->", dp, M, dp))
    if den == 0:
        raise ZeroDivisionError("realized increments have zero weighted variance")
    return 1.0 - float(np.einsum("ti,ij,tj->", err, M, err)) / den


@dataclass
class FitReport:
    model: str
    weight: str
    segment: str  # "in" or "out"
    tau: float
    r2: float
    delta_r2: float
    y: float
    n_train_bins: int
    n_eval_bins: int
    covariates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def delta_r2(r2_model, r2_diag) -> float:
    """Accuracy gain of a cross-sectional model over the diagonal one.

    Accepts plain numbers or two :class:`FitReport` objects; reports must
    share weight, segment and bin size.
    """
    if isinstance(r2_model, FitReport) or isinstance(r2_diag, FitReport):
        a, b = r2_model, r2_diag
        if (a.weight, a.segment, a.tau) != (b.weight, b.segment, b.tau):
            raise ValueError("R2 values come from different evaluation settings")
        return a.r2 - b.r2
    return float(r2_model) - float(r2_diag)


def liquidity(vols: DailyVols) -> np.ndarray:
    """``omega_bar * sigma_bar``, the typical money P&L per bin of each asset."""
    return vols.omega_bar * vols.sigma_bar


def _usable(vols: DailyVols) -> DailyVols:
    ok = np.all(vols.sigma_hat > 0, axis=1) & np.all(vols.omega_hat > 0, axis=1)
    if ok.all():
        return vols
    logger.info("dropping %d day(s) with a zero daily volatility", int((~ok).sum()))
    return DailyVols(vols.days[ok], vols.sigma_hat[ok], vols.omega_hat[ok],
                     vols.excluded_days + tuple(int(d) for d in vols.days[~ok]))


@dataclass(frozen=True, eq=False)
class FitSetup:
    """Calibration and evaluation material shared by every model of one fit."""

    train: BinnedPanel
    train_moments: MomentSet
    eval: BinnedPanel
    eval_moments: MomentSet
    M: np.ndarray
    weight: WeightSpec
    segment: str


def prepare_fit(train: BinnedPanel, test: BinnedPanel | None, weight="basket", *,
                vol_mode: str = "same_day", moments: str = "factored") -> FitSetup:
    """Moments of the training and evaluation segments plus the weight matrix.

    ``moments`` is ``"factored"`` (daily vols x stationary correlations of
    the training segment) or ``"sample"`` (plain pooled sample moments of
    the training panel, used unchanged on every evaluation day).
    ``vol_mode`` selects same-day or previous-day vols on evaluation days.
    ``test=None`` evaluates in-sample.
    """
    weight = WeightSpec.parse(weight)
    if vol_mode not in ("same_day", "lagged"):
        raise ValueError(f"unknown vol_mode {vol_mode!r}")
    if moments == "sample":
        ms_train = MomentSet.pooled(train)
        train_used = train
    elif moments == "factored":
        vtr = _usable(daily_vols(train))
        corr = stationary_correlations(train, vtr)
        ms_train = reconstruct_all(vtr, corr)
        train_used = train.select_days(vtr.days)
    else:
        raise ValueError(f"unknown moments mode {moments!r}")
    M = weight.matrix(ms_train)

    if test is None:
        ev, ms_eval = train_used, ms_train
    elif moments == "sample":
        ev = test
        k = len(test.days)
        ms_eval = MomentSet(test.days, *(np.repeat(a[:1], k, 0) for a in
                                         (ms_train.Sigma, ms_train.Omega, ms_train.R)))
    else:
        vev = _usable(daily_vols(test))
        if vol_mode == "lagged":
            vev = vev.lagged(vtr)
        ms_eval = reconstruct_all(vev, corr)
        ev = test.select_days(vev.days)
    if ev.n_bins == 0:
        raise ValueError("no evaluation bins")
    return FitSetup(train_used, ms_train, ev, ms_eval, M, weight, "in" if test is None else "out")


def fit_models(train: BinnedPanel, test: BinnedPanel | None, kinds: Sequence, weight="basket", *,
               vol_mode: str = "same_day", moments: str = "factored") -> dict[str, FitReport]:
    """Fit each model on ``train`` and score it on ``test`` (see :func:`prepare_fit`).

    The diagonal model is always fit too, as the ``delta_r2`` baseline.
    """
    setup = prepare_fit(train, test, weight, vol_mode=vol_mode, moments=moments)
    kinds = [ModelKind.parse(k) for k in kinds]
    ev, M = setup.eval, setup.M
    out: dict[str, FitReport] = {}
    for kind in [ModelKind.DIAGONAL] + [k for k in kinds if k is not ModelKind.DIAGONAL]:
        y = calibrate_y(setup.train, kind, setup.train_moments, M)
        lam = daily_lambdas(kind, setup.eval_moments, y=y, tau=train.tau)
        pred, _ = predict(lam, ev)
        r2 = generalized_r2(ev.delta_p, pred, M)
        base = out[ModelKind.DIAGONAL.value].r2 if kind is not ModelKind.DIAGONAL else r2
        out[kind.value] = FitReport(kind.value, str(setup.weight), setup.segment, train.tau, r2, r2 - base,
                                    y, setup.train.n_bins, ev.n_bins)
    return {k.value: out[k.value] for k in kinds}


def y_regression_series(setup: FitSetup, kind) -> tuple[np.ndarray, np.ndarray]:
    """Realized and ``Y = 1`` predicted increments of the evaluation segment.

    Both are whitened by ``M^{1/2}`` and flattened, so an ordinary
    regression of the first on the second reproduces the M-weighted Y fit.
    """
    base = daily_lambdas(kind, setup.eval_moments, y=1.0, tau=setup.eval.tau)
    pred, _ = predict(base, setup.eval)
    W = matrix_sqrt(setup.M)
    return (setup.eval.delta_p @ W).ravel(), (pred @ W).ravel()


def pooled_impact_matrix(setup: FitSetup, kind) -> ImpactMatrix:
    """One matrix from the training moments averaged over days, with the calibrated Y."""
    ms = setup.train_moments
    y = calibrate_y(setup.train, kind, ms, setup.M)
    return build_lambda(kind, ms.Sigma.mean(0), ms.Omega.mean(0), ms.R.mean(0), y=y, tau=setup.train.tau)


@dataclass
class ScanResult:
    model: str
    weight: str
    taus: list[float]
    r2: list[float]
    delta_r2: list[float]
    skipped: list[tuple[float, str]] = field(default_factory=list)

    def _argmax(self, values):
        if not values:
            return math.nan, math.nan
        k = int(np.argmax(values))  # first maximum -> smaller tau on ties
        return self.taus[k], values[k]

    @property
    def tau_star(self) -> float:
        return self._argmax(self.r2)[0]

    @property
    def r2_star(self) -> float:
        return self._argmax(self.r2)[1]

    @property
    def tau_star_delta(self) -> float:
        return self._argmax(self.delta_r2)[0]

    @property
    def delta_r2_star(self) -> float:
        return self._argmax(self.delta_r2)[1]

    @classmethod
    def from_curve(cls, taus, r2, delta=None, model="", weight="") -> "ScanResult":
        taus = [float(t) for t in taus]
        return cls(model, weight, taus, [float(x) for x in r2],
                   [float(x) for x in (delta if delta is not None else np.zeros(len(taus)))])

    def records(self, pair=()) -> list[dict]:
        return [{"pair": list(pair), "model": self.model, "weight": self.weight, "tau": t,
                 "r2": r, "delta_r2": d} for t, r, d in zip(self.taus, self.r2, self.delta_r2)]


def split_days(cal: TradingCalendar, train_fraction: float = 0.5) -> tuple[list[int], list[int]]:
    """First ``train_fraction`` of the calendar days for training, the rest for evaluation."""
    k = len(cal)
    cut = int(round(k * train_fraction))
    if not 0 < cut < k:
        raise ValueError("split leaves an empty segment")
    return list(range(cut)), list(range(cut, k))


def _scan_point(ticks, cal, tau, kinds, weight, split, segment, min_bins, vol_mode):
    panel = bin_ticks(ticks, tau, cal)
    train = panel.select_days(split[0])
    test = panel.select_days(split[1]) if segment == "out" else None
    n_eval = (test if test is not None else train).n_bins
    if n_eval < min_bins:
        return f"only {n_eval} evaluation bins"
    try:
        return fit_models(train, test, kinds, weight, vol_mode=vol_mode)
    except (ValueError, ZeroDivisionError, SingularFlowCovariance) as exc:
        return f"fit failed: {exc}"


def scan_models(ticks: TickData, cal: TradingCalendar, kinds: Sequence, weight="basket",
                taus: Sequence[float] = DEFAULT_TAU_GRID, split=None, *, segment: str = "out",
                min_bins: int = MIN_EVAL_BINS, workers: int = 1,
                vol_mode: str = "same_day") -> dict[str, ScanResult]:
    """R2 and delta-R2 curves over a grid of bin sizes for several models at once.

    Grid points run independently (on ``workers`` threads) and are
    assembled in grid order. Points with fewer than ``min_bins`` evaluation
    bins, or whose fit fails, are skipped and listed in ``skipped``.
    """
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("empty tau grid")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau grid must be strictly increasing")
    kinds = [ModelKind.parse(k).value for k in kinds]
    weight = WeightSpec.parse(weight)
    split = split or split_days(cal)
    args = (kinds, weight, split, segment, min_bins, vol_mode)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(lambda t: _scan_point(ticks, cal, t, *args), taus))
    else:
        points = [_scan_point(ticks, cal, t, *args) for t in taus]

    results = {k: ScanResult(k, str(weight), [], [], []) for k in kinds}
    for tau, pt in zip(taus, points):
        for k in kinds:
            res = results[k]
            if isinstance(pt, str):
                res.skipped.append((tau, pt))
                continue
            res.taus.append(tau)
            res.r2.append(pt[k].r2)
            res.delta_r2.append(pt[k].delta_r2)
    for k, res in results.items():
        if res.skipped:
            logger.info("%s scan skipped %d grid point(s)", k, len(res.skipped))
    return results


def scan_bin_sizes(ticks: TickData, cal: TradingCalendar, kind, weight="basket",
                   taus: Sequence[float] = DEFAULT_TAU_GRID, split=None, **kw) -> ScanResult:
    """Out-of-sample R2 curve of one model over bin sizes; see :func:`scan_models`."""
    kind = ModelKind.parse(kind).value
    return scan_models(ticks, cal, [kind], weight, taus, split, **kw)[kind]


def epps_curve(ticks: TickData, cal: TradingCalendar, pair: tuple[int, int],
               taus: Sequence[float]) -> np.ndarray:
    """Pearson correlation of two assets' binned price increments at each bin size.

    Entries where either series has zero variance are NaN.
    """
    taus = list(taus)
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau grid must be sorted ascending")
    i, j = pair
    sub = ticks.select_assets([i] if i == j else [i, j])
    out = np.full(len(taus), np.nan)
    for k, tau in enumerate(taus):
        dp = bin_ticks(sub, tau, cal).delta_p
        if dp.shape[0] < 2:
            continue
        x, y = dp[:, 0], dp[:, -1]
        if np.std(x) == 0 or np.std(y) == 0:
            continue
        out[k] = 1.0 if i == j else float(np.corrcoef(x, y)[0, 1])
    return out


def pair_sampling(rho, n_buckets: int) -> list[tuple[int, int]]:
    """One pair per occupied correlation bucket.

    ``|rho|`` in ``[0, 1]`` is cut into ``n_buckets`` equal half-open
    intervals (the last one closed); each occupied bucket contributes its
    lexicographically first pair ``(i, j), i < j``. Pairs come back ordered by
    bucket.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[0]
    chosen: dict[int, tuple[int, int]] = {}
    for i in range(n):
        for j in range(i + 1, n):
            r = abs(rho[i, j])
            if not np.isfinite(r):
                continue
            b = min(int(r * n_buckets), n_buckets - 1)
            chosen.setdefault(b, (i, j))
    return [chosen[b] for b in sorted(chosen)]


@dataclass
class Covariates:
    """Asset characteristics joined onto fit reports."""

    frequency: np.ndarray
    rho: np.ndarray
    liquidity: np.ndarray
    tau_ref: float = REFERENCE_TAU

    def for_pair(self, pair: Sequence[int]) -> dict:
        i = pair[0]
        j = pair[1] if len(pair) > 1 else pair[0]
        return {"f_i": float(self.frequency[i]), "f_j": float(self.frequency[j]),
                "rho": float(self.rho[i, j]),
                "liq_i": float(self.liquidity[i]), "liq_j": float(self.liquidity[j])}


def covariates(ticks: TickData, cal: TradingCalendar, tau_ref: float = REFERENCE_TAU) -> Covariates:
    """Trading frequency over the full sample; correlation and liquidity at ``tau_ref``."""
    panel = bin_ticks(ticks, tau_ref, cal)
    vols = daily_vols(panel)
    corr = stationary_correlations(panel, vols)
    return Covariates(trading_frequency(ticks, cal), corr.rho_dp, liquidity(vols), tau_ref)


def dump_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
