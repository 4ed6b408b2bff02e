import numpy as np
import pytest

from ximpact.ingest import BinnedPanel


def random_spd(rng, n, cond=50.0):
    """Random SPD matrix with eigenvalues spread over ``[1, cond]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0, np.log(cond), n))
    A = (Q * w) @ Q.T
    return 0.5 * (A + A.T)


def random_moments(rng, n):
    """Consistent (Sigma, Omega, R) from a random linear market."""
    Omega = random_spd(rng, n)
    lam = rng.standard_normal((n, n))
    noise = random_spd(rng, n, cond=5.0)
    return lam @ Omega @ lam.T + noise, Omega, lam @ Omega


def panel_from(dp, q, days=None, tau=1.0):
    dp = np.atleast_2d(np.asarray(dp, dtype=float).T).T
    q = np.atleast_2d(np.asarray(q, dtype=float).T).T
    N = dp.shape[0]
    days = np.zeros(N, np.int64) if days is None else np.asarray(days, np.int64)
    return BinnedPanel(tau, np.arange(N, dtype=np.int64), days, np.zeros_like(dp), dp, q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
