"""Sensitivity of the sharp-null test to unmeasured confounding of the instrument.

Within a stratum, a subject's odds of receiving instrument level 1 may differ
from another's by at most a factor ``Gamma``.  Writing ``gamma = log(Gamma)``,
assignments inside stratum ``i`` have probability proportional to
``exp(gamma * z'u)`` for an unobserved ``u`` in ``{0, 1}^n_i``.  For a binary
outcome the stratum's contribution to the sign-score statistic only depends on
how many ``R = 1`` and ``R = 0`` units have ``u = 1``, so the worst case is
found by enumerating those counts.  Strata are then combined by a Normal
approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Cohort, FullMatch
from .exceptions import ValidationError
from .inference import ALTERNATIVES, StratifiedSample, sign_score_test

DEFAULT_GAMMAS = (1.1, 1.2, 1.3)


@dataclass(frozen=True)
class SensitivityResult:
    gamma: float
    p_min: float
    p_max: float
    statistic: float
    alternative: str = "two-sided"


@dataclass(frozen=True)
class Amplification:
    gamma: float
    curve: tuple[tuple[float, float], ...]  # (Delta, Lambda) pairs


def stratum_extremes(n: int, m: int, b: int, gamma: float):
    """Worst-case moments of ``sum_j Z_j R_j`` in one stratum.

    Parameters
    ----------
    n, m : int
        Stratum size and number of instrument-1 units; ``m == 1`` or ``m == n - 1``.
    b : int
        Number of units with ``R = 1``.
    gamma : float
        Sensitivity parameter ``Gamma >= 1``.

    Returns
    -------
    (mean_max, var_max, mean_min, var_min)
        Largest expectation (ties broken by larger variance) and smallest
        expectation (ties broken by smaller variance) over all ``u``.
    """
    if min(m, n - m) != 1:
        raise ValidationError("strata must have one treated or one control unit")
    k1 = np.arange(b + 1)[:, None]
    k0 = np.arange(n - b + 1)[None, :]
    # One treated unit picked with weight Gamma^u, or one control with Gamma^-u.
    g = gamma if m == 1 else 1.0 / gamma
    p = (k1 * g + (b - k1)) / ((k1 + k0) * g + (n - k1 - k0))
    mean = p if m == 1 else b - p
    var = p * (1 - p)
    mean, var = mean.ravel(), var.ravel()
    hi = np.lexsort((-var, -mean))[0]
    lo = np.lexsort((var, mean))[0]
    return float(mean[hi]), float(var[hi]), float(mean[lo]), float(var[lo])


def _tail(stat, mean, var, upper: bool) -> float:
    if var > 0:
        z = (stat - mean) / math.sqrt(var)
        return float(norm.sf(z) if upper else norm.cdf(z))
    if upper:
        return 1.0 if stat <= mean else 0.0
    return 1.0 if stat >= mean else 0.0


def _binary_counts(sample: StratifiedSample):
    r = sample.r
    if not np.all((r == 0) | (r == 1)):
        raise ValidationError("sensitivity bounds need a binary 0/1 outcome")
    n = sample.n.astype(int)
    m = sample.m.astype(int)
    b = np.bincount(sample.labels, weights=r, minlength=n.size).astype(int)
    return n, m, b


def bounds_from_sample(sample: StratifiedSample, gamma: float, alternative: str = "two-sided") -> SensitivityResult:
    if not gamma >= 1:
        raise ValidationError("gamma must be at least 1")
    if alternative not in ALTERNATIVES:
        raise ValidationError(f"alternative must be one of {ALTERNATIVES}")
    n, m, b = _binary_counts(sample)
    k = n.size
    w = n / (m * (n - m))
    stat = math.fsum((w * sample._sum(sample.z * sample.r)).tolist()) / k
    cache: dict[tuple[int, int, int], tuple] = {}
    hi_mean, hi_var, lo_mean, lo_var = (np.empty(k) for _ in range(4))
    for i, key in enumerate(zip(n.tolist(), m.tolist(), b.tolist())):
        if key not in cache:
            cache[key] = stratum_extremes(*key, gamma)
        hi_mean[i], hi_var[i], lo_mean[i], lo_var[i] = cache[key]
    mu_hi = math.fsum((w * hi_mean).tolist()) / k
    mu_lo = math.fsum((w * lo_mean).tolist()) / k
    v_hi = math.fsum((w * w * hi_var).tolist()) / (k * k)
    v_lo = math.fsum((w * w * lo_var).tolist()) / (k * k)
    if alternative == "two-sided":
        upper = stat >= sign_score_test(sample, "greater").mean
    else:
        upper = alternative == "greater"
    if upper:
        p_max, p_min = _tail(stat, mu_hi, v_hi, True), _tail(stat, mu_lo, v_lo, True)
    else:
        p_max, p_min = _tail(stat, mu_lo, v_lo, False), _tail(stat, mu_hi, v_hi, False)
    if alternative == "two-sided":
        p_max, p_min = min(1.0, 2 * p_max), min(1.0, 2 * p_min)
    return SensitivityResult(float(gamma), p_min, p_max, stat, alternative)


def sensitivity_bounds(cohort: Cohort, match: FullMatch, gamma: float, alternative: str = "two-sided") -> SensitivityResult:
    """Bounds on the sign-score p-value for the sharp null when bias is at most ``gamma``.

    The two-sided version doubles the one-sided bound in the direction the
    statistic deviates from its randomization mean, capped at 1.  At
    ``gamma == 1`` both bounds equal the randomization p-value.

    Raises:
        ValidationError: for a non-binary outcome or ``gamma < 1``.
    """
    return bounds_from_sample(StratifiedSample.from_match(cohort, match), gamma, alternative)


def amplify(gamma: float, lambdas=None, lambda_max: float | None = None, num: int = 50) -> Amplification:
    """Split ``gamma`` into (Delta, Lambda) pairs with ``gamma = (Delta*Lambda + 1)/(Delta + Lambda)``.

    Lambda runs over ``lambdas`` if given, otherwise over ``num`` evenly spaced
    points in ``(gamma, lambda_max]`` (default ``lambda_max = 10 * gamma``).
    """
    if not gamma > 1:
        raise ValidationError("amplification needs gamma > 1")
    if lambdas is None:
        top = 10 * gamma if lambda_max is None else lambda_max
        if not top > gamma:
            raise ValidationError("lambda_max must exceed gamma")
        lambdas = gamma + (top - gamma) * np.arange(1, num + 1) / num
    curve = []
    for lam in np.asarray(lambdas, dtype=float).tolist():
        if lam <= gamma:
            continue
        delta = (lam * gamma - 1) / (lam - gamma)
        if delta > 1 and lam > 1:
            curve.append((delta, lam))
    return Amplification(float(gamma), tuple(curve))


def gamma_from(delta: float, lam: float) -> float:
    return (delta * lam + 1) / (delta + lam)
