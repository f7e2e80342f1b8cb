"""Instrumental propensity score: P(instrument = 1 | covariates) by logistic regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Cohort
from .exceptions import ValidationError

EPS = 1e-6
RIDGE = 1e-8
TOL = 1e-8
MAX_ITER = 50


@dataclass(frozen=True)
class Design:
    """Covariate matrix with no missing cells.

    Attributes:
        matrix: (N, p) array.
        columns: column labels.  Missingness indicators are named
            ``"<covariate>:missing"``.
        indicators: labels of the indicator columns only.
    """

    matrix: np.ndarray
    columns: tuple[str, ...]
    indicators: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    fitted_scores: np.ndarray
    fitted_logits: np.ndarray
    columns: tuple[str, ...] = ()
    design_kind: str = "expanded"


def expand_design(cohort: Cohort) -> Design:
    """Mean-impute missing covariate cells and add a 0/1 missingness indicator.

    Fully observed covariates pass through unchanged.

    Raises:
        ValidationError: if a covariate has no observed values.
    """
    x = cohort.covariates
    blocks, columns, indicators = [], [], []
    for k, name in enumerate(cohort.covariate_names):
        col = x[:, k]
        miss = np.isnan(col)
        if miss.all():
            raise ValidationError(f"covariate {name!r} has no observed values")
        if miss.any():
            filled = np.where(miss, col[~miss].mean(), col)
            blocks += [filled, miss.astype(float)]
            columns += [name, f"{name}:missing"]
            indicators.append(f"{name}:missing")
        else:
            blocks.append(col)
            columns.append(name)
    matrix = np.column_stack(blocks) if blocks else np.empty((len(cohort), 0))
    return Design(matrix, tuple(columns), tuple(indicators))


def _as_matrix(design) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(design, Design):
        return design.matrix, design.columns
    m = np.asarray(design, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    return m, tuple(f"x{k + 1}" for k in range(m.shape[1]))


def fit_propensity(cohort: Cohort, design=None) -> PropensityModel:
    """Fit a logistic regression of the instrument on ``design`` by IRLS.

    A ridge of 1e-8 on the normal equations keeps every step defined under
    separation, and fitted probabilities are clamped to ``[1e-6, 1 - 1e-6]`` both
    during the iterations and in the result.  Iteration stops when the largest
    coefficient change falls below 1e-8 or after 50 steps.

    Parameters
    ----------
    cohort : Cohort
    design : Design or array, optional
        Covariates without missing cells.  Defaults to ``expand_design(cohort)``.

    Returns
    -------
    PropensityModel
        Coefficients have the intercept first.
    """
    if design is None:
        design = expand_design(cohort)
    x, columns = _as_matrix(design)
    if x.shape[0] != len(cohort):
        raise ValidationError("design rows do not match the cohort")
    if not np.all(np.isfinite(x)):
        raise ValidationError("design has missing or non-finite cells")
    y = cohort.instrument.astype(float)
    X = np.column_stack([np.ones(len(y)), x])
    p = X.shape[1]
    beta = np.zeros(p)
    converged = False
    iterations = 0
    ridge = RIDGE * np.eye(p)
    for iterations in range(1, MAX_ITER + 1):
        mu = np.clip(expit(X @ beta), EPS, 1 - EPS)
        w = mu * (1 - mu)
        hessian = (X * w[:, None]).T @ X + ridge
        try:
            step = np.linalg.solve(hessian, X.T @ (y - mu))
        except np.linalg.LinAlgError:
            raise ValidationError("propensity design is rank-deficient beyond ridge rescue") from None
        if not np.all(np.isfinite(step)):
            raise ValidationError("propensity fit produced non-finite coefficients")
        beta = beta + step
        if np.max(np.abs(step)) < TOL:
            converged = True
            break
    eta = X @ beta
    scores = np.clip(expit(eta), EPS, 1 - EPS)
    loglik = float(np.sum(y * np.log(scores) + (1 - y) * np.log1p(-scores)))
    if not np.isfinite(loglik):
        raise ValidationError("propensity likelihood is not finite")
    bound = np.log(EPS / (1 - EPS))
    logits = np.clip(eta, bound, -bound)
    return PropensityModel(beta, converged, iterations, scores, logits, ("(intercept)",) + columns)
