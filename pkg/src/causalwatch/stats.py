"""Correlation, conditional-independence and least-squares kernels.

All tests assume linear-Gaussian dependence: partial correlation is
computed by residualization and judged with a two-sided Student-t test.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

logger = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-8


class DegenerateInputError(ValueError):
    """A constant input made a correlation undefined."""


class InsufficientSamplesError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    """Regressors are rank deficient and no ridge penalty was given."""


class InfiniteInformationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    pvalue: float
    dof: int
    cond_size: int = 0


@dataclass(frozen=True)
class RegressionFit:
    coefficients: np.ndarray
    residual_norm: float
    n_samples: int


def t_pvalue(r: float, dof: int) -> float:
    """Two-sided p-value of ``t = r * sqrt(dof / (1 - r**2))`` under Student-t.

    Uses the identity ``P(|T| > t) = I_{dof/(dof+t^2)}(dof/2, 1/2)`` with the
    regularized incomplete beta function.
    """
    if dof < 1:
        raise InsufficientSamplesError("need at least one degree of freedom")
    r2 = r * r
    if r2 >= 1.0:
        return 0.0
    # dof / (dof + t^2) simplifies to 1 - r^2
    return float(min(1.0, max(0.0, special.betainc(0.5 * dof, 0.5, 1.0 - r2))))


def _check_vector(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return x


def _corr(dx: np.ndarray, dy: np.ndarray) -> float:
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("correlation with a constant input is undefined")
    r = (dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def pearson(x, y) -> CorrelationResult:
    x = _check_vector(x, "x")
    y = _check_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise InsufficientSamplesError("pearson needs at least 3 samples")
    r = _corr(x - x.mean(), y - y.mean())
    dof = n - 2
    return CorrelationResult(r, t_pvalue(r, dof), dof, 0)


def _solve_normal(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    k = gram.shape[0]
    a = gram + ridge * np.eye(k) if ridge else gram
    return linalg.solve(a, rhs, assume_a="pos")


def residualize(v: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Residual of ``v`` after regression on ``Z`` with an intercept."""
    design = np.column_stack([np.ones(len(v)), Z])
    coef, _, rank, _ = np.linalg.lstsq(design, v, rcond=None)
    if rank < design.shape[1]:
        warnings.warn("singular conditioning matrix; using ridge fallback",
                      RuntimeWarning, stacklevel=3)
        coef = _solve_normal(design.T @ design, design.T @ v, RIDGE_FALLBACK)
    return v - design @ coef


def partial_correlation(x, y, Z=None, *, tol: float = 1e-10) -> CorrelationResult:
    """Correlation of ``x`` and ``y`` after removing the linear effect of ``Z``.

    If either residual vanishes (relative norm below ``tol``) the variable is
    a deterministic function of ``Z`` and is reported as conditionally
    independent: ``r = 0``, ``pvalue = 1``.
    """
    x = _check_vector(x, "x")
    y = _check_vector(y, "y")
    if Z is None or np.size(Z) == 0:
        return pearson(x, y)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n, k = Z.shape
    if x.size != n or y.size != n:
        raise ValueError("x, y and Z must have the same number of rows")
    dof = n - k - 2
    if dof < 1:
        raise InsufficientSamplesError(
            f"{n} samples cannot support a conditioning set of size {k}")
    rx = residualize(x, Z)
    ry = residualize(y, Z)
    if (rx @ rx <= tol ** 2 * np.sum((x - x.mean()) ** 2)
            or ry @ ry <= tol ** 2 * np.sum((y - y.mean()) ** 2)):
        return CorrelationResult(0.0, 1.0, dof, k)
    r = _corr(rx, ry)
    return CorrelationResult(r, t_pvalue(r, dof), dof, k)


def cmi_gaussian(r: float) -> float:
    """Conditional mutual information of a Gaussian pair with partial correlation ``r``."""
    if abs(r) >= 1.0:
        raise InfiniteInformationError("|r| = 1 carries infinite information")
    return float(-0.5 * np.log1p(-r * r))


def least_squares(y, X, ridge: float = 0.0) -> RegressionFit:
    """Minimize ``||y - X b||^2 + ridge ||b||^2`` (no intercept is added)."""
    y = _check_vector(y, "y")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n != y.size:
        raise ValueError("X and y have different row counts")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if ridge == 0:
        if n < k + 1:
            raise SingularMatrixError(
                f"{n} rows cannot determine {k} coefficients without a ridge penalty")
        coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < k:
            raise SingularMatrixError("regressor matrix is rank deficient")
    else:
        coef = _solve_normal(X.T @ X, X.T @ y, ridge)
    resid = y - X @ coef
    return RegressionFit(coef, float(np.sqrt(resid @ resid)), n)


def fit_or_ridge(y, X) -> RegressionFit:
    """Exact least squares, falling back to the tiny ridge on singular regressors."""
    try:
        return least_squares(y, X)
    except SingularMatrixError:
        warnings.warn("singular regressor matrix; using ridge fallback",
                      RuntimeWarning, stacklevel=2)
        return least_squares(y, X, RIDGE_FALLBACK)


def solve_gram(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve normal equations given sufficient statistics.

    Falls back to the tiny ridge when the Gram matrix is not positive definite.
    """
    try:
        cho = linalg.cho_factor(gram, check_finite=False)
        coef = linalg.cho_solve(cho, rhs, check_finite=False)
        if np.all(np.isfinite(coef)):
            return coef
    except linalg.LinAlgError:
        pass
    warnings.warn("singular Gram matrix; using ridge fallback", RuntimeWarning,
                  stacklevel=2)
    return _solve_normal(gram, rhs, RIDGE_FALLBACK)
