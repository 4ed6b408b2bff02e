"""Cross-impact models: diagonal, Maximum-Likelihood and Kyle.

Every model maps a moment triple ``(Sigma, Omega, R)`` (price-increment
covariance, flow covariance, price/flow response) to an ``n x n`` matrix
``Lambda`` such that predicted increments are ``Lambda @ q``. A scalar
``y`` rescales the matrix and is fit by weighted least squares
(:func:`calibrate_y`).
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg

SYM_TOL = 1e-10
PSD_CLIP = 1e-10
OMEGA_RIDGE = 1e-8


class ModelKind(str, Enum):
    DIAGONAL = "diag"
    ML = "ml"
    KYLE = "kyle"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        aliases = {"diagonal": "diag", "maximum_likelihood": "ml"}
        v = str(value).strip().lower()
        return cls(aliases.get(v, v))


class SingularFlowCovariance(np.linalg.LinAlgError):
    """Flow covariance too degenerate to invert, even after regularization."""


def _check_square(A: np.ndarray, name: str) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def _sym_eigh(A: np.ndarray, name: str = "matrix"):
    """Eigendecomposition of a matrix that must be symmetric up to ``SYM_TOL``."""
    A = _check_square(A, name)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > SYM_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    return np.linalg.eigh(0.5 * (A + A.T))


def matrix_sqrt(A) -> np.ndarray:
    """Unique symmetric PSD square root of a symmetric PSD matrix.

    Eigenvalues above ``-1e-10 * lambda_max`` are treated as noise and
    clipped to zero; anything more negative is rejected. Eigenvalues within
    rounding of zero (``10 n eps lambda_max``) are zeroed as well, since the
    square root would amplify their noise to ``sqrt(eps)``.
    """
    w, V = _sym_eigh(A, "A")
    if w.size == 0:
        return np.zeros((0, 0))
    top = max(float(w[-1]), 0.0)
    if w[0] < -PSD_CLIP * top - np.finfo(float).tiny:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w[0]:.3e})")
    return _root(w, V)


def _root(w: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``V sqrt(w) V'`` with negative and rounding-level eigenvalues set to zero."""
    top = max(float(w[-1]), 0.0) if w.size else 0.0
    w = np.where(w > 10 * w.size * np.finfo(float).eps * top, w, 0.0)
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def _clipped_spectrum(Omega, ridge: float):
    w, V = _sym_eigh(Omega, "Omega")
    top = float(w[-1]) if w.size else 0.0
    if not top > 0 or not math.isfinite(top):
        raise SingularFlowCovariance(f"flow covariance has no positive eigenvalue (lambda_max={top:.3e})")
    floor = ridge * top
    if w[0] < floor:
        w = np.maximum(w, floor)
    return w, V


def inv_sqrt_factor(Omega, ridge: float = OMEGA_RIDGE) -> np.ndarray:
    """Symmetric inverse square root ``Omega^{-1/2}``.

    Eigenvalues below ``ridge * lambda_max`` are lifted to that floor, so
    the condition number of the regularized matrix is at most ``1/ridge``.
    """
    w, V = _clipped_spectrum(Omega, ridge)
    S = (V / np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def regularized_inverse(Omega, ridge: float = OMEGA_RIDGE) -> np.ndarray:
    w, V = _clipped_spectrum(Omega, ridge)
    S = (V / w) @ V.T
    return 0.5 * (S + S.T)


def regularized(Omega, ridge: float = OMEGA_RIDGE) -> np.ndarray:
    """``Omega`` with its spectrum floored at ``ridge * lambda_max``."""
    w, V = _clipped_spectrum(Omega, ridge)
    S = (V * w) @ V.T
    return 0.5 * (S + S.T)


@dataclass(frozen=True, eq=False)
class ImpactMatrix:
    kind: ModelKind
    lam: np.ndarray
    y: float = 1.0
    tau: float = math.nan

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    def scaled(self, y: float) -> "ImpactMatrix":
        """Same model with Y-ratio ``y`` (the stored matrix already carries ``self.y``)."""
        base = self.lam / self.y if self.y != 0 else self.lam
        return ImpactMatrix(self.kind, base * y, y, self.tau)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "y": float(self.y),
                "tau_seconds": None if math.isnan(self.tau) else float(self.tau),
                "lambda": self.lam.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImpactMatrix":
        tau = d.get("tau_seconds")
        return cls(ModelKind.parse(d["kind"]), np.asarray(d["lambda"], dtype=float),
                   float(d.get("y", 1.0)), math.nan if tau is None else float(tau))


def lambda_diag(Sigma, Omega, R, y: float = 1.0, tau: float = math.nan) -> ImpactMatrix:
    """Own-flow impact only: ``Lambda_ii = y * R_ii / Omega_ii``."""
    Omega = _check_square(Omega, "Omega")
    R = _check_square(R, "R")
    d = np.diag(Omega)
    if np.any(d <= 0):
        raise SingularFlowCovariance("zero flow variance on the diagonal")
    return ImpactMatrix(ModelKind.DIAGONAL, np.diag(y * np.diag(R) / d), y, tau)


def lambda_ml(Sigma, Omega, R, y: float = 1.0, tau: float = math.nan,
              ridge: float = OMEGA_RIDGE) -> ImpactMatrix:
    """``Lambda = y * R @ inv(Omega)``, the least-squares regression of increments on flows."""
    R = _check_square(R, "R")
    return ImpactMatrix(ModelKind.ML, y * (R @ regularized_inverse(Omega, ridge)), y, tau)


def lambda_kyle(Sigma, Omega, R=None, y: float = 1.0, tau: float = math.nan,
                ridge: float = OMEGA_RIDGE, factor: str = "symmetric") -> ImpactMatrix:
    r"""Kyle cross-impact matrix.

    .. math::
        \Lambda = y\, (\Omega^{-1/2})^\top \sqrt{(\Omega^{1/2})^\top \Sigma\, \Omega^{1/2}}\;\Omega^{-1/2}

    the unique symmetric PSD solution of ``Lambda @ Omega @ Lambda = y**2 * Sigma``.
    ``factor`` picks the square-root factor of ``Omega``: ``"symmetric"``
    (default) or ``"cholesky"``; both give the same matrix up to rounding.
    """
    Sigma = _check_square(Sigma, "Sigma")
    w, V = _clipped_spectrum(Omega, ridge)
    if factor == "symmetric":
        half = (V * np.sqrt(w)) @ V.T
        half = 0.5 * (half + half.T)
        inv_half = (V / np.sqrt(w)) @ V.T
        inv_half = 0.5 * (inv_half + inv_half.T)
    elif factor == "cholesky":
        om = (V * w) @ V.T
        half = np.linalg.cholesky(0.5 * (om + om.T))
        inv_half = linalg.solve_triangular(half, np.eye(len(w)), lower=True)
    else:
        raise ValueError(f"unknown factor {factor!r}")
    inner = half.T @ Sigma @ half
    inner = 0.5 * (inner + inner.T)
    root = _root(*np.linalg.eigh(inner))
    lam = inv_half.T @ root @ inv_half
    lam = 0.5 * (lam + lam.T)
    return ImpactMatrix(ModelKind.KYLE, y * lam, y, tau)


_BUILDERS = {ModelKind.DIAGONAL: lambda_diag, ModelKind.ML: lambda_ml, ModelKind.KYLE: lambda_kyle}


def build_lambda(kind, Sigma, Omega, R, y: float = 1.0, tau: float = math.nan) -> ImpactMatrix:
    return _BUILDERS[ModelKind.parse(kind)](Sigma, Omega, R, y=y, tau=tau)


@dataclass(frozen=True, eq=False)
class NoiseResiduals:
    eta: np.ndarray


def _per_bin(lam, panel):
    """Stack of the impact matrix in force for every bin of ``panel``."""
    if isinstance(lam, ImpactMatrix):
        if lam.n != panel.n_assets:
            raise ValueError(f"impact matrix is {lam.n}x{lam.n} but panel has {panel.n_assets} assets")
        return None, lam.lam
    days = panel.days
    missing = [int(d) for d in days if int(d) not in lam]
    if missing:
        raise KeyError(f"no impact matrix for day(s) {missing[:5]}")
    stack = np.stack([lam[int(d)].lam for d in days])
    if stack.shape[1] != panel.n_assets:
        raise ValueError("impact matrix and panel disagree on the number of assets")
    return np.searchsorted(days, panel.day), stack


def predict(lam, panel) -> tuple[np.ndarray, NoiseResiduals]:
    """Predicted increments ``Lambda q_t`` and the residuals ``dp_t - Lambda q_t``.

    ``lam`` is a single :class:`ImpactMatrix` or a mapping from day index
    to the matrix used on that day.
    """
    pos, stack = _per_bin(lam, panel)
    if pos is None:
        pred = panel.q @ stack.T
    else:
        pred = np.einsum("tij,tj->ti", stack[pos], panel.q)
    return pred, NoiseResiduals(panel.delta_p - pred)


def daily_lambdas(kind, moments, y: float = 1.0, tau: float = math.nan) -> dict[int, ImpactMatrix]:
    """One impact matrix per day of a :class:`~ximpact.moments.MomentSet`."""
    return {int(d): build_lambda(kind, moments.Sigma[k], moments.Omega[k], moments.R[k], y=y, tau=tau)
            for k, d in enumerate(moments.days)}


def calibrate_y(panel, kind, moments, weight) -> float:
    """Least-squares Y-ratio on ``panel``.

    Minimizes ``sum_t (dp_t - Y dp0_t)' M (dp_t - Y dp0_t)`` where ``dp0``
    is the prediction of the ``Y = 1`` model built from ``moments`` and
    ``M`` is ``weight`` (an array, or anything with ``matrix(moments)``).
    """
    M = weight.matrix(moments) if hasattr(weight, "matrix") else np.asarray(weight, dtype=float)
    base = daily_lambdas(kind, moments, y=1.0, tau=panel.tau)
    if not all(np.all(np.isfinite(b.lam)) for b in base.values()):
        raise ValueError("base impact matrix is not finite")
    pred, _ = predict(base, panel)
    num = float(np.einsum("ti,ij,tj->", panel.delta_p, M, pred))
    den = float(np.einsum("ti,ij,tj->", pred, M, pred))
    if not den > 0:
        raise ZeroDivisionError("model predicts zero variance on the calibration sample")
    return num / den
