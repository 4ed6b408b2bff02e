import numpy as np
import pytest

from ximpact.ingest import bin_ticks, trading_frequency
from ximpact.metrics import fit_models, generalized_r2
from ximpact.models import lambda_kyle, lambda_ml
from ximpact.moments import MomentSet, daily_vols, sample_moments, stationary_correlations
from ximpact.simulator import (FACTOR_STREAM, BinSimConfig, TickSimConfig, aggregate_panel, planted_moments,
                               simulate_bin_level, simulate_ticks, stream)
from ximpact.stats import acf

LAM4 = np.array([[1.0, 0.3, 0.0, 0.1],
                 [0.2, 0.8, 0.2, 0.0],
                 [0.0, 0.1, 1.2, 0.3],
                 [0.1, 0.0, 0.2, 0.9]])
OM4 = np.diag([1.0, 2.0, 0.5, 1.5]) + 0.1
SIG4 = 0.5 * np.eye(4) + 0.1


def test_stream_independence():
    a = stream(1, 0, 0).standard_normal(5)
    np.testing.assert_array_equal(a, stream(1, 0, 0).standard_normal(5))
    assert not np.array_equal(a, stream(1, 1, 0).standard_normal(5))
    assert not np.array_equal(a, stream(1, 0, FACTOR_STREAM).standard_normal(5))


# bin level ----------------------------------------------------------------------

def test_planted_moments_examples(rng):
    O, S = np.diag([1.0, 2.0]), np.diag([0.3, 0.4])
    np.testing.assert_array_equal(planted_moments(BinSimConfig(np.zeros((2, 2)), O, S, n_bins=10, n_days=1)).sigma, S)
    L = np.array([[2.0, 0.5], [0.5, 1.0]])
    pm = planted_moments(BinSimConfig(L, np.eye(2), np.zeros((2, 2)), n_bins=10, n_days=1))
    np.testing.assert_allclose(pm.sigma, L @ L, atol=1e-15)
    np.testing.assert_allclose(lambda_kyle(pm.sigma, np.eye(2)).lam, L, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        BinSimConfig(np.eye(2), -np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        BinSimConfig(np.eye(2), np.eye(3), np.eye(2))
    with pytest.raises(ValueError):
        TickSimConfig(persistence=1.0)
    with pytest.raises(ValueError):
        TickSimConfig(rho=1.5)


def test_zero_impact_response_null():
    cfg = BinSimConfig(np.zeros((3, 3)), np.eye(3), np.eye(3), n_bins=100_000, seed=1)
    _, _, R = sample_moments(simulate_bin_level(cfg).panel)
    assert np.abs(R).max() < 3 / np.sqrt(100_000)


def test_noiseless_ml_is_exact():
    cfg = BinSimConfig(LAM4, OM4, np.zeros((4, 4)), n_bins=2_000, seed=2, n_days=2)
    p = simulate_bin_level(cfg).panel
    lam = lambda_ml(*sample_moments(p), ridge=0.0).lam
    assert generalized_r2(p.delta_p, p.q @ lam.T, np.eye(4)) == pytest.approx(1.0, abs=1e-10)


def test_planted_recovery_and_moments():
    cfg = BinSimConfig(LAM4, OM4, SIG4, n_bins=100_000, seed=3)
    sim = simulate_bin_level(cfg)
    S, O, R = sample_moments(sim.panel)
    lam = lambda_ml(S, O, R, ridge=0.0).lam
    assert np.linalg.norm(lam - LAM4) / np.linalg.norm(LAM4) < 0.05
    for est, ref in ((S, sim.truth.sigma), (O, OM4)):
        assert np.linalg.norm(est - ref) / np.linalg.norm(ref) < 0.02


def test_bin_sim_deterministic_and_daily():
    cfg = BinSimConfig(LAM4, OM4, SIG4, n_bins=1000, seed=9, n_days=4)
    a, b = simulate_bin_level(cfg).panel, simulate_bin_level(cfg).panel
    np.testing.assert_array_equal(a.delta_p, b.delta_p)
    assert a.n_bins == 1000 and np.unique(a.day).tolist() == [0, 1, 2, 3]
    assert np.all(np.diff(a.bin_open_ts) > 0)


def test_aggregate_panel():
    cfg = BinSimConfig(np.eye(2), np.eye(2), np.eye(2), n_bins=100, seed=1, n_days=2)
    p = simulate_bin_level(cfg).panel
    agg = aggregate_panel(p, 7)
    assert agg.n_bins == 2 * 7 and agg.tau == 7.0
    np.testing.assert_allclose(agg.q[0], p.q[:7].sum(0))
    np.testing.assert_allclose(agg.delta_p[7], p.delta_p[50:57].sum(0))


# tick level ---------------------------------------------------------------------

def test_trade_count_poisson():
    r = simulate_ticks(TickSimConfig(n=1, rates=1.0, session_seconds=10_000, n_days=1, seed=4))
    assert 9700 <= int(r.ticks.is_trade.sum()) <= 10300
    np.testing.assert_allclose(trading_frequency(r.ticks, r.calendar), r.ticks.is_trade.sum() / 10_000)


@pytest.mark.parametrize("persistence,lo,hi", [(0.0, None, None), (0.4, 0.35, 0.45)])
def test_sign_persistence(persistence, lo, hi):
    r = simulate_ticks(TickSimConfig(n=1, rates=1.0, persistence=persistence, session_seconds=100_000,
                                     n_days=1, seed=5))
    s = r.signs[0]
    a1 = acf(s, 1).acf[1]
    if lo is None:
        assert abs(a1) < 3 / np.sqrt(s.size)
    else:
        assert lo <= a1 <= hi
    trades = r.ticks.is_trade
    np.testing.assert_array_equal(np.sign(r.ticks.qty[trades]), s)


def test_ticks_well_formed():
    r = simulate_ticks(TickSimConfig(n=2, n_days=2, latency=2.0, saturation=5.0, seed=6))
    t = r.ticks
    assert np.all(np.diff(t.ts) >= 0)
    assert np.all(t.ts % (86_400 * 10**9) < 23_400 * 10**9)
    q = ~t.is_trade
    np.testing.assert_allclose(t.ask[q] - t.bid[q], 0.01)
    assert np.all(np.isnan(t.price[q])) and np.all(np.isfinite(t.price[~q]))


@pytest.mark.parametrize("kernel", ["exponential", "power", "none"])
def test_tick_reproducible_across_workers(kernel):
    base = dict(n=3, n_days=4, seed=7, kernel=kernel, session_seconds=3600.0, latency=1.0, saturation=5.0, rho=0.5)
    a = simulate_ticks(TickSimConfig(**base, workers=1)).ticks
    b = simulate_ticks(TickSimConfig(**base, workers=4)).ticks
    for col in ("ts", "asset", "is_trade", "price", "qty", "bid", "ask"):
        assert getattr(a, col).tobytes() == getattr(b, col).tobytes()


def test_planted_correlation_at_large_tau():
    r = simulate_ticks(TickSimConfig(n=2, rho=0.6, n_days=40, seed=8))
    p = bin_ticks(r.ticks, 1800.0, r.calendar)
    corr = stationary_correlations(p, daily_vols(p))
    assert abs(corr.rho_dp[0, 1] - 0.6) < 0.05


def test_planted_lambda_is_kyle():
    cfg = TickSimConfig(n=2, rho=0.5, vol=[0.01, 0.02], volume=[10.0, 100.0])
    D = np.diag(cfg.vol)
    C = cfg.price_correlation()
    lam = cfg.planted_lambda()
    O = np.diag(cfg.flow_variance_rate())
    np.testing.assert_allclose(lam @ O @ lam, 0.5 * D @ C @ D, atol=1e-14)
    np.testing.assert_allclose(lam, lam.T, atol=1e-18)


def test_truth_json():
    r = simulate_ticks(TickSimConfig(n=2, n_days=1, seed=1, session_seconds=100))
    d = r.truth.to_dict()
    assert set(d) == {"lambda", "rho", "noise_vol", "config"}
    assert TickSimConfig.from_dict({k: v for k, v in d["config"].items()}).to_dict() == d["config"]


def test_saturation_hump():
    from ximpact.metrics import scan_models
    r = simulate_ticks(TickSimConfig(n=2, rates=1.0, latency=2.0, saturation=10.0, n_days=40, seed=12))
    s = scan_models(r.ticks, r.calendar, ["kyle"], "basket", [1.0, 20.0, 2000.0])["kyle"]
    assert s.taus == [1.0, 20.0, 2000.0]
    assert s.r2[1] > s.r2[0] and s.r2[1] > s.r2[2]
