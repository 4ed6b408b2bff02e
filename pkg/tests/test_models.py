import json
import math

import numpy as np
import pytest
from scipy import linalg

from conftest import panel_from, random_moments, random_spd
from ximpact.models import (ImpactMatrix, ModelKind, SingularFlowCovariance, build_lambda, calibrate_y,
                            inv_sqrt_factor, lambda_diag, lambda_kyle, lambda_ml, matrix_sqrt, predict)
from ximpact.moments import MomentSet, sample_moments
from ximpact.simulator import BinSimConfig, simulate_bin_level

KINDS = ["diag", "ml", "kyle"]


def _lam(kind, S, O, R, **kw):
    return build_lambda(kind, S, O, R, **kw).lam


# matrix utilities ------------------------------------------------------------

def test_matrix_sqrt_examples():
    np.testing.assert_array_equal(matrix_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(matrix_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    # eigenpairs (3, [1,1]/sqrt2) and (1, [1,-1]/sqrt2)
    a, b = (math.sqrt(3) + 1) / 2, (math.sqrt(3) - 1) / 2
    S = matrix_sqrt(A)
    np.testing.assert_allclose(S, [[a, b], [b, a]], atol=1e-14)
    np.testing.assert_allclose(S, [[1.36603, 0.36603], [0.36603, 1.36603]], atol=5e-6)
    assert np.abs(S @ S - A).max() < 1e-12


def test_matrix_sqrt_errors():
    with pytest.raises(ValueError):
        matrix_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt(np.diag([1.0, -1.0]))


def test_matrix_sqrt_random(rng):
    for n in (1, 3, 6):
        A = random_spd(rng, n)
        S = matrix_sqrt(A)
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.norm(S @ S - A) <= 1e-10 * max(1, np.linalg.norm(A))
        assert np.linalg.eigvalsh(S)[0] > 0


def test_inv_sqrt_factor(rng):
    np.testing.assert_array_equal(inv_sqrt_factor(np.eye(2)), np.eye(2))
    np.testing.assert_allclose(inv_sqrt_factor(np.diag([4.0, 25.0])), np.diag([0.5, 0.2]), atol=1e-15)
    O = random_spd(rng, 3)
    F = inv_sqrt_factor(O)
    Finv = np.linalg.inv(F)
    assert np.abs(Finv @ Finv.T - O).max() <= 1e-10 * np.abs(O).max()


def test_singular_flow_covariance():
    with pytest.raises(SingularFlowCovariance):
        inv_sqrt_factor(np.zeros((2, 2)))


# builders --------------------------------------------------------------------

def test_lambda_diag_examples():
    R, O = np.diag([2.0, 3.0]), np.diag([4.0, 9.0])
    np.testing.assert_array_equal(lambda_diag(None, O, R).lam, np.diag([0.5, 1 / 3]))
    np.testing.assert_array_equal(lambda_diag(None, O, R, y=0.0).lam, 0)
    with pytest.raises(SingularFlowCovariance):
        lambda_diag(None, np.diag([0.0, 1.0]), R)


def test_lambda_diag_is_univariate_ols(rng):
    q = rng.standard_normal((500, 3))
    dp = q @ rng.standard_normal((3, 3)) + rng.standard_normal((500, 3))
    lam = lambda_diag(*sample_moments(panel_from(dp, q))).lam
    slopes = (dp * q).sum(0) / (q * q).sum(0)
    np.testing.assert_allclose(np.diag(lam), slopes, rtol=1e-12)
    assert np.count_nonzero(lam - np.diag(np.diag(lam))) == 0


def test_lambda_ml_examples(rng):
    R = rng.standard_normal((3, 3))
    np.testing.assert_allclose(lambda_ml(None, np.eye(3), R).lam, R, atol=1e-15)
    np.testing.assert_array_equal(lambda_ml(None, random_spd(rng, 3), np.zeros((3, 3))).lam, 0)


def test_lambda_kyle_examples(rng):
    np.testing.assert_allclose(lambda_kyle(np.eye(2), np.eye(2)).lam, np.eye(2), atol=1e-15)
    S = random_spd(rng, 3)
    np.testing.assert_allclose(lambda_kyle(S, np.eye(3), y=2.5).lam, 2.5 * linalg.sqrtm(S).real, atol=1e-10)


def test_lambda_kyle_fixture():
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    O = np.diag([4.0, 1.0])
    # independent oracle: scipy's Schur-based sqrtm on the literal formula
    h = np.diag([2.0, 1.0])
    hi = np.diag([0.5, 1.0])
    ref = hi.T @ linalg.sqrtm(h.T @ S @ h).real @ hi
    lam = lambda_kyle(S, O).lam
    np.testing.assert_allclose(lam, ref, atol=1e-10)
    np.testing.assert_allclose(lambda_kyle(S, O, factor="cholesky").lam, lam, atol=1e-8)
    np.testing.assert_allclose(lam @ O @ lam, S, atol=1e-10)


# calibration and prediction ---------------------------------------------------

def _moments_of(panel):
    return MomentSet.pooled(panel)


def test_calibrate_y_trivial(rng):
    q = rng.standard_normal((50, 2))
    lam = np.array([[1.0, 0.2], [0.1, 0.7]])
    M = np.eye(2)
    ms = MomentSet(np.array([0]), np.eye(2)[None], np.eye(2)[None], lam[None])  # ML base = lam
    assert calibrate_y(panel_from(q @ lam.T, q), "ml", ms, M) == pytest.approx(1.0, abs=1e-14)
    assert calibrate_y(panel_from(2 * q @ lam.T, q), "ml", ms, M) == pytest.approx(2.0, abs=1e-14)


def test_calibrate_y_zero_prediction(rng):
    ms = MomentSet(np.array([0]), np.eye(1)[None], np.eye(1)[None], np.zeros((1, 1, 1)))
    with pytest.raises(ZeroDivisionError):
        calibrate_y(panel_from(rng.standard_normal(10), rng.standard_normal(10)), "ml", ms, np.eye(1))


def test_calibrate_y_monte_carlo():
    lam = np.array([[1.0, 0.3], [0.3, 0.5]])
    sim = simulate_bin_level(BinSimConfig(lam, np.eye(2), np.eye(2), n_bins=100_000, seed=5))
    truth = MomentSet(np.arange(10), *(np.repeat(a[None], 10, 0) for a in
                                       (sim.truth.sigma, np.eye(2), lam)))
    y = calibrate_y(sim.panel, "ml", truth, np.eye(2))
    assert abs(y - 1) < 0.02


def test_predict_examples(rng):
    q = rng.standard_normal((5, 2))
    dp = rng.standard_normal((5, 2))
    p = panel_from(dp, q)
    pred, res = predict(ImpactMatrix(ModelKind.ML, np.zeros((2, 2))), p)
    np.testing.assert_array_equal(pred, 0)
    np.testing.assert_array_equal(res.eta, dp)
    pred, _ = predict(ImpactMatrix(ModelKind.ML, np.eye(2)), p)
    np.testing.assert_array_equal(pred, q)
    L = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred, res = predict(ImpactMatrix(ModelKind.ML, L), panel_from([[0.0, 0.0]], [[1.0, -1.0]]))
    assert pred.tolist() == [[1 - 2, 3 - 4]]
    assert res.eta.tolist() == [[1.0, 1.0]]
    assert len(res.eta) == 1
    with pytest.raises(ValueError):
        predict(ImpactMatrix(ModelKind.ML, np.eye(3)), p)


def test_predict_per_day(rng):
    p = panel_from(np.zeros((4, 1)), np.ones((4, 1)), days=[0, 0, 1, 1])
    lams = {0: ImpactMatrix(ModelKind.ML, np.eye(1)), 1: ImpactMatrix(ModelKind.ML, 2 * np.eye(1))}
    pred, _ = predict(lams, p)
    assert pred[:, 0].tolist() == [1, 1, 2, 2]
    with pytest.raises(KeyError):
        predict({0: lams[0]}, p)


def test_impact_matrix_json_roundtrip():
    m = ImpactMatrix(ModelKind.KYLE, np.array([[1.0, 0.5], [0.5, 2.0]]), y=0.8, tau=30.0)
    d = json.loads(m.to_json())
    assert set(d) == {"kind", "y", "tau_seconds", "lambda"}
    back = ImpactMatrix.from_dict(d)
    np.testing.assert_array_equal(back.lam, m.lam)
    assert (back.kind, back.y, back.tau) == (m.kind, m.y, m.tau)


# model laws -------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_permutation_equivariance(rng, kind):
    for _ in range(10):
        n = int(rng.integers(2, 6))
        S, O, R = random_moments(rng, n)
        P = np.eye(n)[rng.permutation(n)]
        lhs = _lam(kind, P @ S @ P.T, P @ O @ P.T, P @ R @ P.T)
        np.testing.assert_allclose(lhs, P @ _lam(kind, S, O, R) @ P.T, atol=1e-10)


@pytest.mark.parametrize("kind", ["diag", "ml"])
def test_cash_and_split_literal(rng, kind):
    for _ in range(10):
        n = int(rng.integers(2, 6))
        S, O, R = random_moments(rng, n)
        D = np.diag(rng.uniform(0.2, 5, n))
        V = np.diag(rng.uniform(0.2, 5, n))
        L = _lam(kind, S, O, R)
        np.testing.assert_allclose(_lam(kind, D @ S @ D, O, D @ R), D @ L, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(_lam(kind, S, V @ O @ V, R @ V), L @ np.linalg.inv(V), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("kind", KINDS)
def test_unit_change_congruence(rng, kind):
    """Rescaling asset units with value p*q preserved maps Lambda to D Lambda D."""
    for _ in range(10):
        n = int(rng.integers(2, 6))
        S, O, R = random_moments(rng, n)
        d = rng.uniform(0.2, 5, n)
        D, Di = np.diag(d), np.diag(1 / d)
        lhs = _lam(kind, D @ S @ D, Di @ O @ Di, D @ R @ Di)
        np.testing.assert_allclose(lhs, D @ _lam(kind, S, O, R) @ D, rtol=1e-9, atol=1e-10)


def test_kyle_scalar_cash_and_split(rng):
    S, O, R = random_moments(rng, 4)
    L = _lam("kyle", S, O, R)
    np.testing.assert_allclose(_lam("kyle", 9 * S, O, 3 * R), 3 * L, rtol=1e-10)
    np.testing.assert_allclose(_lam("kyle", S, 4 * O, 2 * R), L / 2, rtol=1e-10)


def test_kyle_breaks_literal_per_asset_cash():
    rng = np.random.default_rng(7)
    S, O, R = random_moments(rng, 3)
    D = np.diag([1.0, 2.0, 5.0])
    gap = np.abs(_lam("kyle", D @ S @ D, O, D @ R) - D @ _lam("kyle", S, O, R)).max()
    assert gap > 1e-3  # Kyle stays symmetric, D @ Lambda does not


@pytest.mark.parametrize("kind", ["ml", "kyle"])
def test_rotational_equivariance(rng, kind):
    for _ in range(10):
        n = int(rng.integers(2, 6))
        S, O, R = random_moments(rng, n)
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        lhs = _lam(kind, Q @ S @ Q.T, Q @ O @ Q.T, Q @ R @ Q.T)
        np.testing.assert_allclose(lhs, Q @ _lam(kind, S, O, R) @ Q.T, atol=1e-8)


def test_diagonal_not_rotation_equivariant():
    rng = np.random.default_rng(3)
    S, O, R = random_moments(rng, 3)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    gap = np.abs(_lam("diag", Q @ S @ Q.T, Q @ O @ Q.T, Q @ R @ Q.T) - Q @ _lam("diag", S, O, R) @ Q.T).max()
    assert gap > 1e-2


def test_kyle_structure(rng):
    for _ in range(20):
        n = int(rng.integers(1, 7))
        S, O, R = random_moments(rng, n)
        L = lambda_kyle(S, O, R, y=0.7).lam
        np.testing.assert_allclose(L, L.T, atol=1e-10 * np.abs(L).max())
        w = np.linalg.eigvalsh(L / 0.7)
        assert w[0] >= -1e-10 * w[-1]
        np.testing.assert_allclose(lambda_kyle(S, O, factor="cholesky", y=0.7).lam, L, atol=1e-8)


def test_kyle_commuting_planted_identity():
    lam = np.diag([0.5, 2.0, 1.5])
    O = np.diag([4.0, 1.0, 9.0])
    np.testing.assert_allclose(lambda_kyle(lam @ O @ lam, O).lam, lam, atol=1e-8)


def test_ml_in_sample_optimality(rng):
    q = rng.standard_normal((1000, 3))
    dp = q @ rng.standard_normal((3, 3)) + rng.standard_normal((1000, 3))
    L = lambda_ml(*sample_moments(panel_from(dp, q)), ridge=0.0).lam
    coef, *_ = np.linalg.lstsq(q, dp, rcond=None)
    assert np.linalg.norm(L - coef.T) / np.linalg.norm(coef) < 1e-10
    loss = np.sum((dp - q @ L.T) ** 2)
    for _ in range(50):
        P = L + 1e-3 * rng.standard_normal(L.shape)
        assert np.sum((dp - q @ P.T) ** 2) >= loss


def test_build_lambda_dispatch(rng):
    S, O, R = random_moments(rng, 2)
    for k in KINDS:
        m = build_lambda(k, S, O, R, y=2.0, tau=5.0)
        assert m.kind is ModelKind.parse(k)
        assert (m.y, m.tau) == (2.0, 5.0)
    assert ModelKind.parse("diagonal") is ModelKind.DIAGONAL
    np.testing.assert_array_equal(lambda_diag(S, O, R).lam, np.diag(np.diag(lambda_diag(S, O, R).lam)))


def test_kyle_singular_sigma_factor_invariance(rng):
    for _ in range(20):
        n = int(rng.integers(2, 7))
        A = rng.standard_normal((n, n - 1))
        S, O = A @ A.T, random_spd(rng, n)
        L = lambda_kyle(S, O).lam
        assert np.abs(lambda_kyle(S, O, factor="cholesky").lam - L).max() < 1e-8
        np.testing.assert_allclose(L @ O @ L, S, atol=1e-9 * np.abs(S).max())
