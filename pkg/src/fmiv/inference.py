"""Effect-ratio estimation and randomization inference on a full match.

Within stratum ``i`` (size ``n_i``, ``m_i`` instrument-1 members) define

    G_i = n_i^2 / (m_i (n_i - m_i)) * sum_j (Z_ij - Zbar_i)(R_ij - Rbar_i)
    H_i = the same with D in place of R.

The effect-ratio estimate is ``mean(G) / mean(H)``.  For a hypothesised ratio
``lambda0`` the per-stratum statistic is ``V_i = G_i - lambda0 * H_i``, the
test statistic is ``T = mean(V)`` and its variance estimate
``S^2 = sum (V_i - T)^2 / (I (I - 1))``.  Inverting ``|T / S| <= q`` gives a
Fieller-type confidence set that may be an interval, two half-lines or the
whole line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from .data import Cohort, FullMatch
from .exceptions import DegenerateVarianceError, ValidationError, WeakInstrumentError

ALTERNATIVES = ("two-sided", "greater", "less")


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float).tolist())


def normal_p_value(z: float, alternative: str = "two-sided") -> float:
    if alternative == "two-sided":
        return float(min(1.0, 2.0 * norm.sf(abs(z))))
    if alternative == "greater":
        return float(norm.sf(z))
    if alternative == "less":
        return float(norm.cdf(z))
    raise ValidationError(f"alternative must be one of {ALTERNATIVES}")


@dataclass(frozen=True)
class StratifiedSample:
    """Instrument, outcome and exposure arrays with a stratum label per subject.

    Labels must be ``0..I-1``.  This is the numeric core that every statistic in
    this module and in :mod:`fmiv.sensitivity` is computed from.
    """

    z: np.ndarray
    r: np.ndarray
    d: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_match(cls, cohort: Cohort, match: FullMatch) -> "StratifiedSample":
        labels = match.labels(cohort)
        if labels.min() < 0:
            raise ValidationError("match does not cover the cohort")
        return cls(cohort.instrument, cohort.outcome, cohort.exposure, labels)

    @cached_property
    def n_strata(self) -> int:
        return int(self.labels.max()) + 1

    @cached_property
    def n(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_strata).astype(float)

    @cached_property
    def m(self) -> np.ndarray:
        return np.bincount(self.labels, weights=self.z, minlength=self.n_strata)

    def _sum(self, x) -> np.ndarray:
        return np.bincount(self.labels, weights=x, minlength=self.n_strata)

    def contrast(self, y) -> np.ndarray:
        """``n^2/(m(n-m)) * sum (Z - Zbar)(y - ybar)`` for each stratum."""
        n, m = self.n, self.m
        return n * n / (m * (n - m)) * self._sum(self.z * y) - n / (n - m) * self._sum(y)

    @cached_property
    def G(self) -> np.ndarray:
        return self.contrast(self.r)

    @cached_property
    def H(self) -> np.ndarray:
        return self.contrast(self.d)

    def V(self, lambda0: float) -> np.ndarray:
        """Treated-arm total scaled by n/m minus control-arm total scaled by n/(n-m)."""
        y = self.r - lambda0 * self.d
        n, m = self.n, self.m
        return n / m * self._sum(self.z * y) - n / (n - m) * self._sum((1 - self.z) * y)

    def estimate(self) -> float:
        h = _fsum(self.H)
        scale = _fsum(np.abs(self.H))
        if h == 0 or abs(h) <= 1e-14 * scale:
            raise WeakInstrumentError("no within-strata association between instrument and exposure")
        return _fsum(self.G) / h

    def statistic(self, lambda0: float = 0.0) -> "TestStatistic":
        v = self.V(lambda0)
        k = v.size
        t = _fsum(v) / k
        if k < 2:
            raise DegenerateVarianceError("the variance estimate needs at least two strata")
        s2 = _fsum((v - t) ** 2) / (k * (k - 1))
        return TestStatistic(t, s2, v)

    def p_value(self, lambda0: float = 0.0, alternative: str = "two-sided") -> float:
        st = self.statistic(lambda0)
        if not st.S2 > 0:
            raise DegenerateVarianceError("S(lambda0) is zero; the test is undefined")
        return normal_p_value(st.T / math.sqrt(st.S2), alternative)

    def interval(self, alpha: float = 0.05, truncate=None) -> "ConfidenceInterval":
        return _fieller(self.G, self.H, alpha, truncate)


class TestStatistic(NamedTuple):
    T: float
    S2: float
    V: np.ndarray


@dataclass(frozen=True)
class ConfidenceInterval:
    """Confidence set for the effect ratio.

    ``intervals`` lists the disjoint pieces, with ``-inf``/``inf`` for unbounded
    ends.  For ``half-lines`` the two finite cut points are ``low`` and ``high``
    and the set is ``(-inf, low] U [high, inf)``.
    """

    low: float
    high: float
    shape: str
    intervals: tuple[tuple[float, float], ...]
    alpha: float

    def __contains__(self, value: float) -> bool:
        return any(lo <= value <= hi for lo, hi in self.intervals)


def _roots(a2, a1, a0):
    disc = a1 * a1 - 4 * a2 * a0
    root = math.sqrt(max(disc, 0.0))
    qq = -0.5 * (a1 + math.copysign(root, a1))
    if qq == 0:
        x = -a1 / (2 * a2)
        return disc, x, x
    r1, r2 = qq / a2, a0 / qq
    return disc, min(r1, r2), max(r1, r2)


def _fieller(G, H, alpha, truncate=None) -> ConfidenceInterval:
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    k = G.size
    if k < 2:
        raise DegenerateVarianceError("the confidence interval needs at least two strata")
    q = norm.ppf(1 - alpha / 2)
    g, h = _fsum(G) / k, _fsum(H) / k
    c = q * q / (k * (k - 1))
    dg, dh = G - g, H - h
    a2 = h * h - c * _fsum(dh * dh)
    a1 = -2 * g * h + 2 * c * _fsum(dg * dh)
    a0 = g * g - c * _fsum(dg * dg)
    inf = math.inf
    if a2 > 0:
        _, lo, hi = _roots(a2, a1, a0)
        shape, pieces = "bounded", ((lo, hi),)
    elif a2 < 0:
        disc, lo, hi = _roots(a2, a1, a0)
        if disc > 0:
            shape, pieces = "half-lines", ((-inf, lo), (hi, inf))
        else:
            lo, hi = -inf, inf
            shape, pieces = "whole-line", ((-inf, inf),)
    elif a1 != 0:
        cut = -a0 / a1
        lo, hi = (-inf, cut) if a1 > 0 else (cut, inf)
        shape, pieces = "half-lines", ((lo, hi),)
    else:
        lo, hi = -inf, inf
        shape, pieces = "whole-line", ((-inf, inf),)
    if truncate is not None:
        tlo, thi = truncate
        pieces = tuple((max(a, tlo), min(b, thi)) for a, b in pieces if max(a, tlo) <= min(b, thi))
        if pieces:
            lo, hi = pieces[0][0], pieces[-1][1]
        else:
            lo = hi = math.nan
    return ConfidenceInterval(lo, hi, shape, pieces, alpha)


@dataclass(frozen=True)
class EffectRatioInference:
    lambda_hat: float
    lambda0: float
    test_value: float
    p_value: float
    ci_low: float
    ci_high: float
    ci_shape: str
    alpha: float
    per_stratum_V: np.ndarray
    G: np.ndarray
    H: np.ndarray


def effect_ratio_estimate(cohort: Cohort, match: FullMatch) -> float:
    """Closed-form effect-ratio estimate ``mean(G) / mean(H)``.

    Raises:
        WeakInstrumentError: when ``mean(H)`` is zero.
    """
    return StratifiedSample.from_match(cohort, match).estimate()


def test_statistic(cohort: Cohort, match: FullMatch, lambda0: float = 0.0) -> TestStatistic:
    """``(T, S^2, V)`` for the hypothesis that the effect ratio equals ``lambda0``."""
    return StratifiedSample.from_match(cohort, match).statistic(lambda0)


test_statistic.__test__ = False  # keep pytest from collecting the name


def p_value(cohort: Cohort, match: FullMatch, lambda0: float = 0.0, alternative: str = "two-sided") -> float:
    """Normal-approximation p-value of ``T / S`` (two-sided by default)."""
    return StratifiedSample.from_match(cohort, match).p_value(lambda0, alternative)


def confidence_interval(cohort: Cohort, match: FullMatch, alpha: float = 0.05, truncate=None) -> ConfidenceInterval:
    """Invert the test: all ``lambda`` with ``|T(lambda)/S(lambda)| <= q``.

    ``truncate=(lo, hi)`` intersects the set with a plausible range; it is off
    by default so the Fieller shape is reported as is.
    """
    return StratifiedSample.from_match(cohort, match).interval(alpha, truncate)


def infer(
    cohort: Cohort,
    match: FullMatch,
    lambda0: float = 0.0,
    alpha: float = 0.05,
    alternative: str = "two-sided",
    truncate=None,
) -> EffectRatioInference:
    """Estimate, test and confidence set in one pass."""
    sample = StratifiedSample.from_match(cohort, match)
    est = sample.estimate()
    st = sample.statistic(lambda0)
    if not st.S2 > 0:
        raise DegenerateVarianceError("S(lambda0) is zero; the test is undefined")
    z = st.T / math.sqrt(st.S2)
    ci = sample.interval(alpha, truncate)
    return EffectRatioInference(
        est, lambda0, z, normal_p_value(z, alternative), ci.low, ci.high, ci.shape, alpha, st.V, sample.G, sample.H
    )


def first_stage_test(cohort: Cohort, match: FullMatch, alternative: str = "two-sided") -> tuple[float, float]:
    """Within-strata instrument-exposure association: the test with D as the response.

    Returns ``(T_D, p)``.  ``p`` is ``nan`` when the variance estimate is zero.
    """
    s = StratifiedSample.from_match(cohort, match)
    st = StratifiedSample(s.z, s.d, np.zeros_like(s.d), s.labels).statistic(0.0)
    p = normal_p_value(st.T / math.sqrt(st.S2), alternative) if st.S2 > 0 else math.nan
    return st.T, p


class SignScore(NamedTuple):
    statistic: float
    mean: float
    variance: float
    p_value: float


def sign_score_test(sample: StratifiedSample, alternative: str = "two-sided") -> SignScore:
    """Randomization test of the sharp null with the sign-score statistic.

    ``T~ = (1/I) sum_i n_i/(m_i(n_i - m_i)) sum_j Z_ij R_ij``.  Its null moments
    come from sampling ``m_i`` of ``n_i`` units without replacement.
    """
    n, m = sample.n, sample.m
    k = n.size
    w = n / (m * (n - m))
    sum_r = sample._sum(sample.r)
    ss = sample._sum(sample.r**2) - sum_r**2 / n
    stat = _fsum(w * sample._sum(sample.z * sample.r)) / k
    mean = _fsum(w * m * sum_r / n) / k
    var = _fsum(w * w * m * (n - m) / (n * (n - 1)) * ss) / (k * k)
    if var > 0:
        p = normal_p_value((stat - mean) / math.sqrt(var), alternative)
    else:
        p = 1.0
    return SignScore(stat, mean, var, p)


@dataclass(frozen=True)
class PotentialOutcomeTable:
    """Potential outcomes and exposures for a fixed set of subjects (test oracle).

    ``curves[j, k]`` is subject j's response at exposure level k.  When curves
    are given, ``r1 = curves[d1]`` and ``r0 = curves[d0]``, which encodes the
    exclusion restriction.
    """

    r1: np.ndarray
    r0: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    curves: np.ndarray | None = None

    def __post_init__(self):
        for name in ("r1", "r0", "d1", "d0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def from_curves(cls, curves, d1, d0) -> "PotentialOutcomeTable":
        curves = np.asarray(curves, dtype=float)
        d1 = np.asarray(d1, dtype=int)
        d0 = np.asarray(d0, dtype=int)
        rows = np.arange(curves.shape[0])
        return cls(curves[rows, d1], curves[rows, d0], d1, d0, curves)

    @property
    def monotone(self) -> bool:
        return bool(np.all(self.d1 >= self.d0))

    def observed(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Observed (R, D) under instrument vector ``z``."""
        z = np.asarray(z)
        return np.where(z == 1, self.r1, self.r0), np.where(z == 1, self.d1, self.d0)


class OracleValues(NamedTuple):
    eq2: float
    eq4: float
    applicable: bool


def effect_ratio_oracle(table: PotentialOutcomeTable) -> OracleValues:
    """Effect ratio two ways: ratio of total effects, and weighted unit effects.

    The weighted form averages ``r^(k) - r^(k-1)`` over every subject and level
    with ``d0 < k <= d1``.  It needs response curves, monotone exposures and
    integer levels; otherwise it is ``nan`` and ``applicable`` is false.
    """
    den = math.fsum((table.d1 - table.d0).tolist())
    if den == 0:
        raise WeakInstrumentError("the instrument does not change any exposure")
    eq2 = math.fsum((table.r1 - table.r0).tolist()) / den
    curves = table.curves
    applicable = (
        curves is not None
        and table.monotone
        and np.all(table.d1 == np.round(table.d1))
        and np.all(table.d0 == np.round(table.d0))
    )
    if not applicable:
        return OracleValues(eq2, math.nan, False)
    steps = np.diff(curves, axis=1)  # steps[:, k-1] = r^(k) - r^(k-1)
    levels = np.arange(1, curves.shape[1])
    chi = (table.d1[:, None] >= levels[None, :]) & (levels[None, :] > table.d0[:, None])
    weight = math.fsum(chi.ravel().astype(float).tolist())
    eq4 = math.fsum(steps[chi].tolist()) / weight
    return OracleValues(eq2, eq4, True)


class Moments(NamedTuple):
    mean_T: float
    var_T: float
    s2_bias: float


def randomization_moments(table: PotentialOutcomeTable, labels, lambda0: float, m) -> Moments:
    """Exact randomization moments of ``T(lambda0)`` and the bias of ``S^2``.

    Valid for full matches (every stratum has one treated or one control)
    with ``m[i]`` instrument-1 units drawn uniformly inside stratum ``i``.

    Returns:
        ``E[T]``, ``Var[T]`` and ``E[S^2] - Var[T]``.
    """
    labels = np.asarray(labels)
    m = np.asarray(m, dtype=float)
    k = m.size
    n = np.bincount(labels, minlength=k).astype(float)
    if np.any(np.minimum(m, n - m) != 1):
        raise ValidationError("moment formulas need strata with one treated or one control")
    y1 = table.r1 - lambda0 * table.d1
    y0 = table.r0 - lambda0 * table.d0
    a = (n / m)[labels] * y1 + (n / (n - m))[labels] * y0
    a_bar = np.bincount(labels, weights=a, minlength=k) / n
    var_t = _fsum(np.bincount(labels, weights=(a - a_bar[labels]) ** 2, minlength=k) / n) / (k * k)
    mu = np.bincount(labels, weights=y1 - y0, minlength=k)
    mean_t = _fsum(mu) / k
    bias = _fsum((mu - mean_t) ** 2) / (k * (k - 1)) if k > 1 else math.nan
    return Moments(mean_t, var_t, bias)
