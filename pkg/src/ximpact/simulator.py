"""Synthetic markets with planted cross-impact.

Two fidelities are offered:

* :func:`simulate_bin_level` draws binned flows and increments straight from
  the linear model ``dp = Lambda q + eta``.
* :func:`simulate_ticks` generates event streams. Each asset trades at
  Poisson times with Markov-persistent signs; every trade feeds a decaying
  flow state (the propagator) after a random latency; an optional ``tanh``
  saturates the price response to that state. Prices carry a one-factor
  Brownian noise observed only when the asset itself updates its quote,
  which produces the Epps effect.

Random streams are Philox generators keyed by ``(seed, day, stream)`` so
days can be generated in any order or in parallel with identical output.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .ingest import NS_PER_SECOND, BinnedPanel, TickData, TradingCalendar
from .models import lambda_kyle, matrix_sqrt

FACTOR_STREAM = 2**31 - 1
DEFAULT_SESSION = 23_400.0  # 6.5 h


def stream(seed: int, day: int, key: int) -> np.random.Generator:
    """Counter-based generator for one ``(seed, day, key)`` triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(day), int(key)])))


def _psd(name: str, A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1] or not np.allclose(A, A.T, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(A)[0] < -1e-10 * max(1.0, float(np.abs(A).max())):
        raise ValueError(f"{name} is not positive semi-definite")
    return A


# ---------------------------------------------------------------------------
# bin level


@dataclass
class BinSimConfig:
    """Linear bin-level market: ``q ~ N(0, omega)``, ``dp = lam q + eta``, ``eta ~ N(0, sigma_eta)``."""

    lam: np.ndarray
    omega: np.ndarray
    sigma_eta: np.ndarray
    n_bins: int = 100_000
    seed: int = 0
    n_days: int = 10
    tau: float = 1.0
    p0: float | np.ndarray = 100.0

    def __post_init__(self):
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        self.omega = _psd("omega", self.omega)
        self.sigma_eta = _psd("sigma_eta", self.sigma_eta)
        n = self.lam.shape[0]
        if self.lam.shape != (n, n) or self.omega.shape != (n, n) or self.sigma_eta.shape != (n, n):
            raise ValueError("lam, omega and sigma_eta must be n x n")
        if self.n_days < 1 or self.n_bins < self.n_days:
            raise ValueError("need at least one bin per day")

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def from_dict(cls, d: dict) -> "BinSimConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PlantedMoments:
    lam: np.ndarray
    omega: np.ndarray
    sigma: np.ndarray


def planted_moments(cfg: BinSimConfig) -> PlantedMoments:
    """Exact ``(Lambda*, Omega*, Sigma* = Lambda* Omega* Lambda*' + Sigma_eta*)``."""
    return PlantedMoments(cfg.lam.copy(), cfg.omega.copy(),
                          cfg.lam @ cfg.omega @ cfg.lam.T + cfg.sigma_eta)


@dataclass(frozen=True, eq=False)
class BinSimResult:
    panel: BinnedPanel
    truth: PlantedMoments
    config: BinSimConfig


def simulate_bin_level(cfg: BinSimConfig) -> BinSimResult:
    n = cfg.n
    per_day = np.diff(np.linspace(0, cfg.n_bins, cfg.n_days + 1).round().astype(int))
    a_q = matrix_sqrt(cfg.omega)
    a_eta = matrix_sqrt(cfg.sigma_eta)
    tau_ns = int(round(cfg.tau * NS_PER_SECOND))
    day_ns = 86_400 * NS_PER_SECOND
    day_ns *= -(-int(per_day.max()) * tau_ns // day_ns)  # long days never overlap the next one
    qs, dps, ps, ts, days = [], [], [], [], []
    for d, k in enumerate(per_day):
        rng = stream(cfg.seed, d, 0)
        z = rng.standard_normal((2, k, n))
        q = z[0] @ a_q
        dp = q @ cfg.lam.T + z[1] @ a_eta
        qs.append(q)
        dps.append(dp)
        ps.append(cfg.p0 + np.vstack([np.zeros((1, n)), np.cumsum(dp, axis=0)[:-1]]))
        ts.append(d * day_ns + np.arange(k, dtype=np.int64) * tau_ns)
        days.append(np.full(k, d, dtype=np.int64))
    panel = BinnedPanel(cfg.tau, np.concatenate(ts), np.concatenate(days), np.vstack(ps),
                        np.vstack(dps), np.vstack(qs))
    return BinSimResult(panel, planted_moments(cfg), cfg)


def aggregate_panel(panel: BinnedPanel, k: int) -> BinnedPanel:
    """Merge every ``k`` consecutive bins of each day (leftover bins dropped)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    parts = []
    for d, sl in panel.day_slices().items():
        m = (sl.stop - sl.start) // k
        if m == 0:
            continue
        rows = slice(sl.start, sl.start + m * k)
        n = panel.n_assets
        parts.append((panel.bin_open_ts[rows][::k], np.full(m, d, np.int64), panel.p_open[rows][::k],
                      panel.delta_p[rows].reshape(m, k, n).sum(1), panel.q[rows].reshape(m, k, n).sum(1)))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return BinnedPanel(panel.tau * k, *cols, symbols=panel.symbols)


# ---------------------------------------------------------------------------
# tick level


@dataclass
class TickSimConfig:
    """Tick-level market.

    Attributes
    ----------
    rates : trades per second of each asset.
    persistence : lag-1 autocorrelation of each asset's trade signs, in [0, 1).
    volume : contracts per trade of each asset.
    vol : price volatility per sqrt-second of each asset.
    rho : pairwise correlation of the latent prices (one common factor).
    impact_share : share of price variance attributed to trading at short horizons.
    lam : planted impact per contract; ``None`` builds the Kyle matrix of
        ``impact_share * diag(vol) C diag(vol)`` against the flow covariance
        per second, ``C`` the one-factor correlation matrix.
    kernel : ``"exponential"``, ``"power"`` or ``"none"`` (permanent impact).
    half_life : exponential kernel half-life, seconds.
    beta, kernel_t0, kernel_cutoff : power kernel ``(1 + t/t0)^-beta`` for ``t < cutoff`` seconds.
    permanent : fraction of impact that never decays.
    saturation : ``tanh`` scale of the flow state in typical trades, ``None`` for linear.
    latency : mean exponential delay between a trade and its quote update, seconds.
    half_spread, quote_noise : quoted half-spread and iid mid noise, price units.
    """

    n: int = 2
    rates: Sequence[float] | float = 1.0
    persistence: Sequence[float] | float = 0.4
    volume: Sequence[float] | float = 100.0
    vol: Sequence[float] | float = 0.01
    rho: float = 0.0
    impact_share: float = 0.5
    lam: np.ndarray | None = None
    kernel: str = "exponential"
    half_life: float = 60.0
    beta: float = 0.5
    kernel_t0: float = 1.0
    kernel_cutoff: float = 1000.0
    permanent: float = 0.0
    saturation: float | None = None
    latency: float = 0.0
    half_spread: float = 0.005
    quote_noise: float = 0.0
    session_seconds: float = DEFAULT_SESSION
    n_days: int = 10
    p0: float = 100.0
    seed: int = 0
    workers: int = 1
    symbols: Sequence[str] | None = None

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError("n must be >= 1")

        def vec(name, v):
            a = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
            setattr(self, name, a)
            return a

        if np.any(vec("rates", self.rates) <= 0):
            raise ValueError("trade rates must be positive")
        p = vec("persistence", self.persistence)
        if np.any((p < 0) | (p >= 1)):
            raise ValueError("persistence must lie in [0, 1)")
        if np.any(vec("volume", self.volume) <= 0):
            raise ValueError("volumes must be positive")
        if np.any(vec("vol", self.vol) < 0):
            raise ValueError("volatilities must be non-negative")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 <= self.impact_share <= 1:
            raise ValueError("impact_share must lie in [0, 1]")
        if self.kernel not in ("exponential", "power", "none"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "power" and (self.beta <= 0 or self.kernel_cutoff <= 0 or self.kernel_t0 <= 0):
            raise ValueError("power kernel needs beta, t0 and cutoff > 0")
        if self.kernel == "exponential" and self.half_life <= 0:
            raise ValueError("half_life must be positive")
        if not 0 <= self.permanent <= 1:
            raise ValueError("permanent must lie in [0, 1]")
        if self.saturation is not None and self.saturation <= 0:
            raise ValueError("saturation scale must be positive")
        if self.latency < 0 or self.half_spread < 0 or self.quote_noise < 0:
            raise ValueError("latency, half_spread and quote_noise must be non-negative")
        if self.session_seconds <= 0 or self.n_days < 1:
            raise ValueError("need a positive session and at least one day")
        if self.symbols is None:
            self.symbols = tuple(f"S{i}" for i in range(n))
        elif len(self.symbols) != n:
            raise ValueError("one symbol per asset required")
        self.symbols = tuple(self.symbols)
        if self.lam is not None:
            self.lam = np.asarray(self.lam, dtype=float)
            if self.lam.shape != (n, n):
                raise ValueError("lam must be n x n")

    @classmethod
    def from_dict(cls, d: dict) -> "TickSimConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out

    def price_correlation(self) -> np.ndarray:
        C = np.full((self.n, self.n), self.rho)
        np.fill_diagonal(C, 1.0)
        return C

    def flow_variance_rate(self) -> np.ndarray:
        """Per-second flow variance of each asset ignoring sign persistence."""
        return self.rates * self.volume**2

    def planted_lambda(self) -> np.ndarray:
        if self.lam is not None:
            return self.lam
        D = np.diag(self.vol)
        target = self.impact_share * D @ self.price_correlation() @ D
        return lambda_kyle(target, np.diag(self.flow_variance_rate()), ridge=0.0).lam


@dataclass(frozen=True, eq=False)
class TickTruth:
    lam: np.ndarray
    rho: float
    noise_vol: np.ndarray
    config: dict

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "rho": self.rho, "noise_vol": self.noise_vol.tolist(),
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class TickSimResult:
    ticks: TickData
    calendar: TradingCalendar
    truth: TickTruth
    signs: list = field(default_factory=list, repr=False)  # per-asset trade signs, in trade order


@numba.njit(cache=True, nogil=True)
def _exp_loop(e, a, x, z, g, lam_eff, noise_load, rho, decay_rate, permanent, sat, p0):
    """Event loop for the exponential and permanent kernels.

    ``e`` are effective (quote-update) times in increasing order, ``a`` the
    asset of each event, ``x`` its signed volume in typical-trade units,
    ``z`` / ``g`` idiosyncratic and common standard normals.
    """
    n = lam_eff.shape[0]
    m = e.shape[0]
    mids = np.empty(m)
    trans = np.zeros(n)
    perm = np.zeros(n)
    w_own = np.zeros(n)
    t_own = np.zeros(n)
    w0 = 0.0
    t_last = 0.0
    a_common = math.sqrt(rho)
    a_idio = math.sqrt(1.0 - rho)
    for k in range(m):
        t = e[k]
        dt = t - t_last
        w0 += math.sqrt(dt) * g[k]
        t_last = t
        if decay_rate > 0.0:
            f = math.exp(-decay_rate * dt)
            for j in range(n):
                trans[j] *= f
        i = a[k]
        trans[i] += (1.0 - permanent) * x[k]
        perm[i] += permanent * x[k]
        w_own[i] += math.sqrt(t - t_own[i]) * z[k]
        t_own[i] = t
        p = p0[i] + noise_load[i] * (a_common * w0 + a_idio * w_own[i])
        for j in range(n):
            s = trans[j] + perm[j]
            if sat > 0.0:
                s = sat * math.tanh(s / sat)
            p += lam_eff[i, j] * s
        mids[k] = p
    return mids


@numba.njit(cache=True, nogil=True)
def _power_loop(e, a, x, z, g, lam_eff, noise_load, rho, beta, t0, cutoff, permanent, sat, p0):
    n = lam_eff.shape[0]
    m = e.shape[0]
    mids = np.empty(m)
    perm = np.zeros(n)
    trans = np.zeros(n)
    w_own = np.zeros(n)
    t_own = np.zeros(n)
    w0 = 0.0
    t_last = 0.0
    a_common = math.sqrt(rho)
    a_idio = math.sqrt(1.0 - rho)
    start = 0
    for k in range(m):
        t = e[k]
        w0 += math.sqrt(t - t_last) * g[k]
        t_last = t
        i = a[k]
        perm[i] += permanent * x[k]
        while e[start] <= t - cutoff:
            start += 1
        for j in range(n):
            trans[j] = 0.0
        for r in range(start, k + 1):
            trans[a[r]] += (1.0 - permanent) * x[r] * (1.0 + (t - e[r]) / t0) ** (-beta)
        w_own[i] += math.sqrt(t - t_own[i]) * z[k]
        t_own[i] = t
        p = p0[i] + noise_load[i] * (a_common * w0 + a_idio * w_own[i])
        for j in range(n):
            s = trans[j] + perm[j]
            if sat > 0.0:
                s = sat * math.tanh(s / sat)
            p += lam_eff[i, j] * s
        mids[k] = p
    return mids


def _markov_signs(rng: np.random.Generator, m: int, persistence: float) -> np.ndarray:
    """Two-state chain whose lag-1 autocorrelation equals ``persistence``."""
    if m == 0:
        return np.zeros(0)
    flips = rng.random(m) < 0.5 * (1.0 - persistence)
    flips[0] = rng.random() < 0.5  # random initial sign
    return np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)


def _simulate_day(cfg: TickSimConfig, day: int, lam: np.ndarray, noise_vol: np.ndarray):
    n, T = cfg.n, cfg.session_seconds
    t_tr, e_tr, a_tr, x_tr, z_tr, sign_tr, qn_tr = [], [], [], [], [], [], []
    for i in range(n):
        rng = stream(cfg.seed, day, i)
        m = int(rng.poisson(cfg.rates[i] * T))
        t = np.sort(rng.uniform(0.0, T, m))
        s = _markov_signs(rng, m, cfg.persistence[i])
        lat = rng.exponential(cfg.latency, m) if cfg.latency > 0 else np.zeros(m)
        z = rng.standard_normal(m)
        qn = rng.standard_normal(m) * cfg.quote_noise if cfg.quote_noise > 0 else np.zeros(m)
        t_tr.append(t)
        e_tr.append(t + lat)
        a_tr.append(np.full(m, i, dtype=np.int64))
        x_tr.append(s)
        z_tr.append(z)
        sign_tr.append(s)
        qn_tr.append(qn)

    e = np.concatenate(e_tr)
    a = np.concatenate(a_tr)
    order = np.lexsort((a, e))
    e, a = e[order], a[order]
    x = np.concatenate(x_tr)[order]
    z = np.concatenate(z_tr)[order]
    qn = np.concatenate(qn_tr)[order]
    g = stream(cfg.seed, day, FACTOR_STREAM).standard_normal(e.size)
    lam_eff = lam * cfg.volume[None, :]  # price move per typical trade
    sat = float(cfg.saturation) if cfg.saturation else 0.0
    p0 = np.full(n, cfg.p0)
    if cfg.kernel == "power":
        mids = _power_loop(e, a, x, z, g, lam_eff, noise_vol, float(cfg.rho), float(cfg.beta),
                           float(cfg.kernel_t0), float(cfg.kernel_cutoff), float(cfg.permanent), sat, p0)
    else:
        rate = math.log(2.0) / cfg.half_life if cfg.kernel == "exponential" else 0.0
        perm = 1.0 if cfg.kernel == "none" else float(cfg.permanent)
        mids = _exp_loop(e, a, x, z, g, lam_eff, noise_vol, float(cfg.rho), rate, perm, sat, p0)
    mids = mids + qn

    # quotes that land after the close are lost
    keep_q = e < T
    q_t, q_a, q_mid = e[keep_q], a[keep_q], mids[keep_q]
    q_t = np.concatenate([np.zeros(n), q_t])
    q_a = np.concatenate([np.arange(n), q_a])
    q_mid = np.concatenate([p0, q_mid])

    # trade prints at the prevailing own mid, crossing the half-spread
    tr_t, tr_a, tr_p, tr_q = [], [], [], []
    for i in range(n):
        own = q_a == i
        qt, qm = q_t[own], q_mid[own]
        idx = np.searchsorted(qt, t_tr[i], side="right") - 1
        tr_t.append(t_tr[i])
        tr_a.append(np.full(t_tr[i].size, i))
        tr_p.append(qm[idx] + sign_tr[i] * cfg.half_spread)
        tr_q.append(sign_tr[i] * cfg.volume[i])

    open_ns = np.int64(day) * 86_400 * NS_PER_SECOND
    to_ns = lambda s: open_ns + np.round(s * NS_PER_SECOND).astype(np.int64)  # noqa: E731
    nq = q_t.size
    nt = sum(x.size for x in tr_t)
    ts = np.concatenate([to_ns(np.concatenate(tr_t)), to_ns(q_t)])
    asset = np.concatenate([*tr_a, q_a])
    is_trade = np.r_[np.ones(nt, bool), np.zeros(nq, bool)]
    price = np.r_[np.concatenate(tr_p), np.full(nq, np.nan)]
    qty = np.r_[np.concatenate(tr_q), np.zeros(nq)]
    bid = np.r_[np.full(nt, np.nan), q_mid - cfg.half_spread]
    ask = np.r_[np.full(nt, np.nan), q_mid + cfg.half_spread]
    return ts, asset, is_trade, price, qty, bid, ask, sign_tr


def simulate_ticks(cfg: TickSimConfig) -> TickSimResult:
    """Event streams for ``cfg.n_days`` sessions; see the module docstring."""
    lam = cfg.planted_lambda()
    noise_vol = cfg.vol * math.sqrt(1.0 - cfg.impact_share)
    days = range(cfg.n_days)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(lambda d: _simulate_day(cfg, d, lam, noise_vol), days))
    else:
        parts = [_simulate_day(cfg, d, lam, noise_vol) for d in days]
    cols = [np.concatenate([p[c] for p in parts]) for c in range(7)]
    signs = [np.concatenate([p[7][i] for p in parts]) for i in range(cfg.n)]
    ticks = TickData.from_arrays(*cols, symbols=cfg.symbols)
    cal = TradingCalendar.regular(cfg.n_days, cfg.session_seconds)
    truth = TickTruth(lam, float(cfg.rho), noise_vol, cfg.to_dict())
    return TickSimResult(ticks, cal, truth, signs)
