"""Interest-rate curve tools: nested explanatory-set tables and Kyle-matrix normalizations."""

from __future__ import annotations

import csv
import json
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ingest import BinnedPanel
from .metrics import fit_models
from .models import ImpactMatrix, ModelKind, lambda_kyle
from .simulator import BinSimConfig, BinSimResult, simulate_bin_level

UNIT_SCALE = 1e4 * 1e8  # basis points per 100M currency
RATES_TAU = 1800.0
CURVE_TENORS = (2.0, 5.0, 10.0, 20.0, 30.0)


@dataclass(frozen=True)
class TenorMeta:
    index: int
    kind: str  # "cash" or "future"
    tenor: float  # years
    mean_price: float
    notional: float = 100.0

    def __post_init__(self):
        if self.kind not in ("cash", "future"):
            raise ValueError(f"unknown instrument kind {self.kind!r}")
        if not self.tenor > 0:
            raise ValueError("tenor must be positive")
        if not self.mean_price > 0:
            raise ValueError("mean price must be positive")

    @property
    def label(self) -> str:
        return f"{self.kind} {self.tenor:g}Y"


def mean_prices(panel: BinnedPanel) -> np.ndarray:
    """Time-average of the bin-open prices of each asset."""
    return panel.p_open.mean(axis=0)


@dataclass(frozen=True, eq=False)
class NestedTable:
    """Fit of each target from growing explanatory sets.

    ``values[i, 0]`` uses the target's own flow only (diagonal model);
    ``values[i, j]`` for ``j >= 1`` uses the target's own flow plus the first
    ``j`` assets of ``ordering``. Rows refer to ``ordering`` positions.
    """

    values: np.ndarray
    ordering: tuple[int, ...]
    labels: tuple[str, ...]
    model: str
    segment: str

    def square(self) -> np.ndarray:
        """``n x n`` view: cell ``(i, j)`` is column ``j+1`` off the diagonal and the own-flow fit on it."""
        n = len(self.ordering)
        out = self.values[:, 1:].copy()
        out[np.arange(n), np.arange(n)] = self.values[:, 0]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "own", *(f"+{lab}" for lab in self.labels)])
            for lab, row in zip(self.labels, self.values):
                w.writerow([lab, *(repr(float(v)) for v in row)])


def _cell(train, test, subset, target_pos, kind, moments):
    tr = train.select_assets(subset)
    te = test.select_assets(subset) if test is not None else None
    weight = f"asset:{target_pos}"
    return fit_models(tr, te, [kind], weight, moments=moments)[ModelKind.parse(kind).value].r2


def nested_r2_table(train: BinnedPanel, test: BinnedPanel | None, kind="kyle",
                    ordering: Sequence[int] | None = None, labels: Sequence[str] | None = None, *,
                    moments: str = "factored", workers: int = 1) -> NestedTable:
    """Nested table of ``R2(I_sigma_i)``.

    ``test=None`` evaluates in-sample. With ``kind="ml"`` and
    ``moments="sample"`` the in-sample rows are nested least-squares fits and
    hence non-decreasing.
    """
    n = train.n_assets
    ordering = tuple(range(n)) if ordering is None else tuple(int(k) for k in ordering)
    if sorted(ordering) != list(range(n)):
        raise ValueError("ordering must be a permutation of the assets")
    labels = tuple(labels) if labels is not None else tuple(train.symbols[k] for k in ordering)
    # one fit per distinct (target, explanatory set): equal sets give identical cells
    cells: dict[tuple[int, frozenset], tuple[list[int], int, str]] = {}
    layout = []
    for i, target in enumerate(ordering):
        for j in range(n + 1):
            prefix = list(ordering[:j])
            subset = prefix if target in prefix else [target, *prefix]
            key = (target, frozenset(subset))
            # a single asset fits identically under every model
            cells.setdefault(key, (subset, subset.index(target), kind if len(subset) > 1 else "diag"))
            layout.append((i, j, key))

    keys = list(cells)

    def run(key):
        subset, pos, k = cells[key]
        return _cell(train, test, subset, pos, k, moments)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = dict(zip(keys, pool.map(run, keys)))
    else:
        vals = {key: run(key) for key in keys}
    table = np.empty((n, n + 1))
    for i, j, key in layout:
        table[i, j] = vals[key]
    return NestedTable(table, ordering, labels, ModelKind.parse(kind).value,
                       "in" if test is None else "out")


def _lam(x) -> np.ndarray:
    return x.lam if isinstance(x, ImpactMatrix) else np.asarray(x, dtype=float)


def _arrays(meta: Sequence[TenorMeta]):
    p = np.array([m.mean_price for m in meta], dtype=float)
    T = np.array([m.tenor for m in meta], dtype=float)
    if np.any(p <= 0):
        raise ValueError("mean prices must be positive")
    if np.any(T <= 0):
        raise ValueError("tenors must be positive")
    return p, T


def normalize_relative(lam, meta: Sequence[TenorMeta], scale: float = UNIT_SCALE) -> np.ndarray:
    """``scale * Lambda_ij / (p_i p_j)``: relative price impact per currency traded."""
    L = _lam(lam)
    p, _ = _arrays(meta)
    return scale * L / np.outer(p, p)


def denormalize_relative(norm, meta: Sequence[TenorMeta], scale: float = UNIT_SCALE) -> np.ndarray:
    p, _ = _arrays(meta)
    return np.asarray(norm, dtype=float) * np.outer(p, p) / scale


def normalize_yield(lam, meta: Sequence[TenorMeta], scale: float = UNIT_SCALE) -> np.ndarray:
    """``-10 scale * Lambda_ij / (T_i p_j T_j)``: yield impact per 10-year-equivalent currency traded."""
    L = _lam(lam)
    p, T = _arrays(meta)
    return -10.0 * scale * L / (T[:, None] * (p * T)[None, :])


def denormalize_yield(norm, meta: Sequence[TenorMeta], scale: float = UNIT_SCALE) -> np.ndarray:
    p, T = _arrays(meta)
    return np.asarray(norm, dtype=float) * (T[:, None] * (p * T)[None, :]) / (-10.0 * scale)


def zero_coupon_price(r: float, T: float, N: float = 100.0, approximate: bool = False) -> float:
    """``N / (1 + r)^T``; ``approximate=True`` returns ``N / (r T)`` instead."""
    if r <= -1:
        raise ValueError("rate must exceed -1")
    if T <= 0:
        raise ValueError("tenor must be positive")
    if approximate:
        if r * T == 0:
            raise ZeroDivisionError("approximation undefined at r*T = 0")
        return N / (r * T)
    return N / (1.0 + r) ** T


def curve_fixture(seed: int = 0, n_bins: int = 20_000, n_days: int = 20, rate: float = 0.04,
                  liquid: int = 2, impact_share: float = 0.5, idio: float = 0.3,
                  tau: float = RATES_TAU) -> tuple[BinSimResult, list[TenorMeta]]:
    """Synthetic 5-tenor curve.

    Yields move by one parallel shift plus tenor-local noise (share ``idio``
    of each tenor's yield variance); price moves are ``-T p`` times yield
    moves. Flows are independent with the largest volume at tenor index
    ``liquid`` (10 years by default). The planted impact matrix is the Kyle
    matrix of ``impact_share`` of the price covariance.
    """
    T = np.array(CURVE_TENORS)
    n = T.size
    p = np.array([zero_coupon_price(rate, t) for t in T])
    dur = T * p * 1e-4  # price move per bp of yield
    C = (1 - idio) * np.ones((n, n)) + idio * np.eye(n)
    Sigma = dur[:, None] * C * dur[None, :]
    vols = np.full(n, 1.0)
    vols[liquid] = 10.0
    for k in range(n):
        if k != liquid:
            vols[k] = 1.0 + 2.0 / (1 + abs(k - liquid))
    Omega = np.diag(vols**2)
    lam = lambda_kyle(impact_share * Sigma, Omega, ridge=0.0).lam
    cfg = BinSimConfig(lam, Omega, (1 - impact_share) * Sigma, n_bins=n_bins, seed=seed,
                       n_days=n_days, tau=tau, p0=p)
    res = simulate_bin_level(cfg)
    meta = [TenorMeta(k, "cash", float(T[k]), float(mean_prices(res.panel)[k])) for k in range(n)]
    return res, meta


def write_normalized(lam, meta: Sequence[TenorMeta], prefix) -> list[str]:
    """Both normalizations as CSV matrices plus a JSON sidecar describing units."""
    labels = [m.label for m in meta]
    out = []
    for name, mat, unit in (("relative", normalize_relative(lam, meta), "bp of price per 100M traded"),
                            ("yield", normalize_yield(lam, meta),
                             "bp of yield per 100M 10-year-equivalent traded")):
        path = f"{prefix}_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["", *labels])
            for lab, row in zip(labels, mat):
                w.writerow([lab, *(repr(float(v)) for v in row)])
        with open(f"{prefix}_{name}.json", "w") as fh:
            json.dump({"matrix": path.rsplit("/", 1)[-1], "unit": unit, "scale": UNIT_SCALE,
                       "labels": labels, "tenors": [m.tenor for m in meta],
                       "mean_prices": [m.mean_price for m in meta]}, fh, indent=2)
        out.append(path)
    return out

