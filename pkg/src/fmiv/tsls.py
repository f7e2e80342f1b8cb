"""Two-stage least squares with one binary instrument and optional covariates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Cohort
from .exceptions import ValidationError


@dataclass(frozen=True)
class TslsFit:
    beta_hat: float
    se: float
    t_stat: float
    p_value: float
    first_stage_F: float
    coefficients: np.ndarray
    n: int

    def p_value_at(self, beta0: float) -> float:
        """Two-sided Normal p-value for ``beta = beta0``."""
        if not self.se > 0:
            return math.nan
        return float(2 * norm.sf(abs(self.beta_hat - beta0) / self.se))


def _lstsq(X: np.ndarray, y: np.ndarray):
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise ValidationError("design matrix is rank-deficient")
    return np.linalg.solve(r, q.T @ y), q, r


def tsls(outcome, exposure, instrument, covariates=None, beta0: float = 0.0) -> TslsFit:
    """2SLS of ``outcome`` on ``exposure`` instrumented by ``instrument``.

    Stage 1 regresses D on (1, Z, X); stage 2 regresses R on (1, D_hat, X).  The
    homoskedastic standard error uses residuals recomputed with the observed D,
    ``sigma^2 (W_hat' W_hat)^-1``.  A zero residual variance gives ``se = 0``
    (``nan`` when there are no residual degrees of freedom) and ``nan`` test
    values rather than an error, so exactly identified toy data still returns
    its Wald ratio.

    Raises:
        ValidationError: when either stage's design is rank-deficient or the
            instrument takes a single value.
    """
    r = np.asarray(outcome, dtype=float)
    d = np.asarray(exposure, dtype=float)
    z = np.asarray(instrument, dtype=float)
    n = r.size
    x = np.empty((n, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(n, -1)
    if np.unique(z).size < 2:
        raise ValidationError("the instrument must take both levels")
    ones = np.ones((n, 1))
    X1 = np.hstack([ones, z[:, None], x])
    pi, _, _ = _lstsq(X1, d)
    d_hat = X1 @ pi
    # Partial F for Z: restricted model drops the instrument column.
    rss_full = float(np.sum((d - d_hat) ** 2))
    X0 = np.hstack([ones, x])
    g, _, _ = _lstsq(X0, d)
    rss_restricted = float(np.sum((d - X0 @ g) ** 2))
    dof1 = n - X1.shape[1]
    if dof1 > 0 and rss_full > 0:
        f_stat = max((rss_restricted - rss_full) / (rss_full / dof1), 0.0)
    else:
        f_stat = math.inf if rss_restricted > rss_full else 0.0
    W = np.hstack([ones, d_hat[:, None], x])
    coef, _, rr = _lstsq(W, r)
    beta = float(coef[1])
    resid = r - np.hstack([ones, d[:, None], x]) @ coef
    dof2 = n - W.shape[1]
    sigma2 = float(resid @ resid) / dof2 if dof2 > 0 else math.nan
    rinv = np.linalg.inv(rr)
    cov = sigma2 * (rinv @ rinv.T)
    if sigma2 > 0:
        se = math.sqrt(cov[1, 1])
    else:
        se = 0.0 if sigma2 == 0 else math.nan
    if se > 0:
        t_stat = (beta - beta0) / se
        p = float(2 * norm.sf(abs(t_stat)))
    else:
        t_stat = p = math.nan
    return TslsFit(beta, se, t_stat, p, f_stat, coef, n)


def fit_tsls(cohort: Cohort, design=None, beta0: float = 0.0) -> TslsFit:
    """2SLS on a cohort.  ``design`` is a ``Design`` or array of covariates (none by default)."""
    x = None if design is None else np.asarray(getattr(design, "matrix", design), dtype=float)
    if x is not None and x.size == 0:
        x = None
    return tsls(cohort.outcome, cohort.exposure, cohort.instrument, x, beta0)
