"""Monte Carlo engine: data generation, estimator comparison and efficiency checks.

The structural model is

    X | Z ~ N(shift * Z * e1, I_5)
    D* = kappa + pi Z + rho'X + xi          D = D* or a 3-level discretization
    R  = alpha + beta D + f(X) + eps        corr(eps, xi) = error_corr

with exactly ``n_treated`` subjects at Z = 1.  Replicate ``k`` of a study is
driven by ``SeedSequence(master_seed, spawn_key=(k,))``, so any replicate can be
regenerated on its own and results do not depend on execution order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .balance import standardized_differences
from .data import Cohort
from .exceptions import FmivError, ValidationError
from .fullmatch import MatchConstraints, match_cohort, strata_histogram
from .inference import Moments, PotentialOutcomeTable, StratifiedSample
from .tsls import tsls

N_COVARIATES = 5


def _linear(x, g):
    return x @ g


def _quadratic(x, g):
    return (x**2) @ g


def _cubic(x, g):
    return (x**3) @ g


def _exponential(x, g):
    return np.exp(x) @ g


def _log(x, g):
    return np.log(np.abs(x)) @ g


def _logistic(x, g):
    return expit(x @ g)


def _truncated(x, g):
    return (x >= 0).astype(float) @ g


def _sqrt(x, g):
    return np.sqrt(np.abs(x)) @ g


F_KINDS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "linear": _linear,
    "quadratic": _quadratic,
    "cubic": _cubic,
    "exponential": _exponential,
    "log": _log,
    "logistic": _logistic,
    "truncated": _truncated,
    "sqrt": _sqrt,
}


def outcome_function(x, kind: str, gamma_vec) -> np.ndarray:
    """Covariate part ``f(X)`` of the outcome equation."""
    try:
        fn = F_KINDS[kind]
    except KeyError:
        raise ValidationError(f"unknown f_kind {kind!r}; choose from {sorted(F_KINDS)}") from None
    return fn(np.asarray(x, dtype=float), np.asarray(gamma_vec, dtype=float))


@dataclass(frozen=True)
class SimulationPlan:
    """Configuration of one simulated condition.

    ``confounder_sd > 0`` adds a shared Normal term U to both the exposure and
    the outcome equations (an unmeasured confounder of D and R that is
    independent of the instrument).
    """

    n_total: int = 800
    n_treated: int = 100
    f_kind: str = "linear"
    gamma_vec: tuple[float, ...] = (1.0,) * N_COVARIATES
    pi: float = 1.0
    rho: tuple[float, ...] = (0.2,) * N_COVARIATES
    alpha: float = 0.0
    kappa: float = 0.0
    beta: float = 0.5
    error_corr: float = 0.8
    discretize_exposure: bool = False
    replicates: int = 1000
    master_seed: int = 20240611
    shift: float = 1.0
    confounder_sd: float = 0.0
    caliper_sd: float | None = 0.2

    def __post_init__(self):
        object.__setattr__(self, "gamma_vec", tuple(float(v) for v in self.gamma_vec))
        object.__setattr__(self, "rho", tuple(float(v) for v in self.rho))
        if not 0 < self.n_treated < self.n_total:
            raise ValidationError("need 0 < n_treated < n_total")
        if not -1 < self.error_corr < 1:
            raise ValidationError("error_corr must lie in (-1, 1)")
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if len(self.gamma_vec) != N_COVARIATES or len(self.rho) != N_COVARIATES:
            raise ValidationError(f"gamma_vec and rho must have {N_COVARIATES} entries")
        if self.f_kind not in F_KINDS:
            raise ValidationError(f"unknown f_kind {self.f_kind!r}")
        if self.confounder_sd < 0:
            raise ValidationError("confounder_sd must be non-negative")

    @classmethod
    def with_concentration(cls, target: float, **kwargs) -> "SimulationPlan":
        """Plan whose instrument coefficient gives concentration parameter ``target``."""
        if target < 0:
            raise ValidationError("target concentration must be non-negative")
        unit = concentration_parameter(cls(**{**kwargs, "pi": 1.0}))
        return cls(**{**kwargs, "pi": math.sqrt(target / unit)})

    def header(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]


def concentration_parameter(plan: SimulationPlan) -> float:
    """Population first-stage partial F for Z given the covariates.

    ``pi^2 * N * p(1-p) / (1 + shift^2 p(1-p)) / Var(xi)`` with ``p`` the treated
    fraction: the denominator term ``1 + shift^2 p(1-p)`` removes the part of Z
    explained by the shifted covariate.  For a discretized exposure this
    describes the latent D*.
    """
    p = plan.n_treated / plan.n_total
    resid_var = p * (1 - p) / (1 + plan.shift**2 * p * (1 - p))
    noise = 1.0 + plan.confounder_sd**2
    return plan.pi**2 * plan.n_total * resid_var / noise


def replicate_seed(master_seed: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(replicate,))


def _draw(plan: SimulationPlan, rng: np.random.Generator, n: int, n_treated: int):
    z = np.zeros(n, dtype=int)
    z[rng.permutation(n)[:n_treated]] = 1
    x = rng.standard_normal((n, N_COVARIATES))
    x[:, 0] += plan.shift * z
    e = rng.standard_normal((n, 2))
    eps = e[:, 0]
    xi = plan.error_corr * e[:, 0] + math.sqrt(1 - plan.error_corr**2) * e[:, 1]
    u = plan.confounder_sd * rng.standard_normal(n) if plan.confounder_sd > 0 else 0.0
    d_star = plan.kappa + plan.pi * z + x @ np.asarray(plan.rho) + xi + u
    if plan.discretize_exposure:
        d = np.where(d_star < -1, 1.0, np.where(d_star < 1, 2.0, 3.0))
    else:
        d = d_star
    r = plan.alpha + plan.beta * d + outcome_function(x, plan.f_kind, plan.gamma_vec) + eps + u
    return z, x, d, r


def generate_replicate(plan: SimulationPlan, seed) -> Cohort:
    """Draw one cohort.  ``seed`` is anything ``numpy.random.default_rng`` accepts."""
    rng = np.random.default_rng(seed)
    z, x, d, r = _draw(plan, rng, plan.n_total, plan.n_treated)
    return Cohort.from_arrays(z, d, r, x)


def regression_concentration(plan: SimulationPlan, scale: int = 200, seed=0) -> float:
    """Concentration parameter estimated from one large replicate.

    Draws ``scale`` times as many subjects with the same treated fraction and
    returns ``(F - 1) / scale`` for the first-stage partial F of Z.
    """
    rng = np.random.default_rng(seed)
    z, x, d, r = _draw(plan, rng, plan.n_total * scale, plan.n_treated * scale)
    fit = tsls(r, d, z, x)
    return (fit.first_stage_F - 1) / scale


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    median: float
    abs_bias_of_median: float
    mad: float
    type1_rate: float
    type1_halfwidth: float
    n_used: int
    n_failed: int


@dataclass(frozen=True)
class SimulationReport:
    plan: SimulationPlan
    concentration_parameter: float
    estimators: dict[str, EstimatorSummary]
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    rejections: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for s in self.estimators.values():
            row = {"f_kind": self.plan.f_kind, "concentration": self.concentration_parameter}
            row.update(asdict(s))
            out.append(row)
        return out


def _summarize(name, est, rej, beta) -> EstimatorSummary:
    ok = np.isfinite(est)
    used = est[ok]
    failed = int((~ok).sum())
    if used.size == 0:
        return EstimatorSummary(name, math.nan, math.nan, math.nan, math.nan, math.nan, 0, failed)
    med = float(np.median(used))
    mad = float(np.median(np.abs(used - med)))
    r = rej[np.isfinite(rej)]
    rate = float(r.mean()) if r.size else math.nan
    half = 1.96 * math.sqrt(rate * (1 - rate) / r.size) if r.size else math.nan
    return EstimatorSummary(name, med, abs(med - beta), mad, rate, half, int(used.size), failed)


def run_replicate(plan: SimulationPlan, replicate: int, alpha: float = 0.05) -> dict[str, tuple[float, float]]:
    """Matching and 2SLS estimates plus rejection indicators for one replicate.

    A failing estimator yields ``(nan, nan)`` so it is counted as an exclusion.
    """
    cohort = generate_replicate(plan, replicate_seed(plan.master_seed, replicate))
    out = {}
    try:
        pipe = match_cohort(cohort, caliper_sd=plan.caliper_sd)
        sample = StratifiedSample.from_match(cohort, pipe.match)
        est = sample.estimate()
        p = sample.p_value(plan.beta)
        out["matching"] = (est, float(p < alpha))
    except (FmivError, np.linalg.LinAlgError, FloatingPointError):
        out["matching"] = (math.nan, math.nan)
    try:
        fit = tsls(cohort.outcome, cohort.exposure, cohort.instrument, cohort.covariates)
        p = fit.p_value_at(plan.beta)
        out["2sls"] = (fit.beta_hat, float(p < alpha) if np.isfinite(p) else math.nan)
    except (FmivError, np.linalg.LinAlgError):
        out["2sls"] = (math.nan, math.nan)
    return out


def run_study(plan: SimulationPlan, progress: Callable[[int], None] | None = None, alpha: float = 0.05) -> SimulationReport:
    """Run ``plan.replicates`` replicates and summarize each estimator.

    Metrics per estimator: absolute bias of the median estimate, median absolute
    deviation about the median, and the rate of rejecting ``effect = beta`` at
    level ``alpha`` with its 95% Monte Carlo half-width.
    """
    names = ("matching", "2sls")
    est = {k: np.full(plan.replicates, np.nan) for k in names}
    rej = {k: np.full(plan.replicates, np.nan) for k in names}
    for rep in range(plan.replicates):
        res = run_replicate(plan, rep, alpha)
        for k in names:
            est[k][rep], rej[k][rep] = res[k]
        if progress is not None:
            progress(rep)
    summaries = {k: _summarize(k, est[k], rej[k], plan.beta) for k in names}
    return SimulationReport(plan, concentration_parameter(plan), summaries, est, rej)


def enumerate_assignments(labels, m) -> Iterator[np.ndarray]:
    """Every instrument vector with ``m[i]`` ones inside stratum ``i``."""
    labels = np.asarray(labels)
    members = [np.flatnonzero(labels == i) for i in range(len(m))]
    per_stratum = [list(itertools.combinations(g.tolist(), int(k))) for g, k in zip(members, m)]
    for picks in itertools.product(*per_stratum):
        z = np.zeros(labels.size, dtype=int)
        for chosen in picks:
            z[list(chosen)] = 1
        yield z


def enumerated_moments(table: PotentialOutcomeTable, labels, m, lambda0: float) -> Moments:
    """Moments of ``T(lambda0)`` and ``S^2`` by brute force over all assignments.

    Returns ``E[T]``, ``Var[T]`` and ``E[S^2] - Var[T]`` computed over the
    equally likely within-strata assignments.
    """
    labels = np.asarray(labels)
    ts, s2s = [], []
    for z in enumerate_assignments(labels, m):
        r, d = table.observed(z)
        st = StratifiedSample(z, r, d, labels).statistic(lambda0)
        ts.append(st.T)
        s2s.append(st.S2)
    ts = np.array(ts)
    mean_t = math.fsum(ts.tolist()) / ts.size
    var_t = math.fsum(((ts - mean_t) ** 2).tolist()) / ts.size
    mean_s2 = math.fsum(s2s) / len(s2s)
    return Moments(mean_t, var_t, mean_s2 - var_t)


@dataclass(frozen=True)
class EfficiencyInputs:
    """Strata sizes ``n``, treated counts ``m``, outcome noise SDs and first-stage coefficient."""

    n: np.ndarray
    m: np.ndarray
    sigma_R: np.ndarray | float
    gamma_fs: float

    def __post_init__(self):
        object.__setattr__(self, "n", np.asarray(self.n, dtype=float))
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        if self.gamma_fs == 0:
            raise ValidationError("the first-stage coefficient must be nonzero")
        if np.any(np.minimum(self.m, self.n - self.m) != 1):
            raise ValidationError("strata must have one treated or one control unit")


def asymptotic_variance(inputs: EfficiencyInputs) -> float:
    """Large-I variance of the effect-ratio estimate under a linear model.

    ``s_I^2 / (gamma^2 (sum n_i)^2)`` with
    ``s_I^2 = sum n_i^3 / (m_i (n_i - m_i)) sigma_i^2``.
    """
    n, m = inputs.n, inputs.m
    sigma2 = np.broadcast_to(np.asarray(inputs.sigma_R, dtype=float) ** 2, n.shape)
    s2 = math.fsum((n**3 / (m * (n - m)) * sigma2).tolist())
    return s2 / (inputs.gamma_fs**2 * n.sum() ** 2)


def homoscedastic_factor(n) -> float:
    """Design-only factor ``sum n^3/(n-1) / (sum n)^2`` of the homoscedastic variance."""
    n = np.asarray(n, dtype=float)
    return float(np.sum(n**3 / (n - 1)) / n.sum() ** 2)


def pairs_dominant_strata(n_strata: int, seed=0, pair_share: float = 0.7, max_size: int = 4):
    """Random stratum shapes, mostly pairs, the rest 1:k or k:1 up to ``max_size``."""
    rng = np.random.default_rng(seed)
    n = np.full(n_strata, 2)
    m = np.ones(n_strata, dtype=int)
    other = rng.random(n_strata) >= pair_share
    n[other] = rng.integers(3, max_size + 1, other.sum())
    flip = other & (rng.random(n_strata) < 0.5)
    m[flip] = n[flip] - 1
    return n, m


@dataclass(frozen=True)
class VarianceCheck:
    theoretical: float
    simulated: float
    n_strata: int
    gamma_fs: float
    replicates: int

    @property
    def ratio(self) -> float:
        return self.simulated / self.theoretical


def simulate_estimator_variance(
    n,
    m,
    gamma_fs: float,
    sigma_R: float = 1.0,
    sigma_D: float = 1.0,
    corr: float = 0.0,
    beta: float = 0.5,
    replicates: int = 1000,
    seed=0,
) -> VarianceCheck:
    """Simulated vs theoretical variance of the effect-ratio estimate.

    Data follow ``R = alpha_i + beta D + eps`` and ``D = tau_i + gamma Z + xi``
    with instrument positions fixed; ``alpha_i`` and ``tau_i`` are drawn once
    and kept across replicates.
    """
    n = np.asarray(n, dtype=int)
    m = np.asarray(m, dtype=int)
    k = n.size
    labels = np.repeat(np.arange(k), n)
    starts = np.concatenate([[0], np.cumsum(n)[:-1]])
    pos = np.arange(labels.size) - starts[labels]
    z = (pos < m[labels]).astype(float)
    rng = np.random.default_rng(seed)
    alpha_i = rng.normal(0.0, 1.0, k)
    tau_i = rng.normal(0.0, 1.0, k)
    nn, mm = n.astype(float), m.astype(float)
    coef = nn * nn / (mm * (nn - mm))
    size = labels.size
    # Centered instrument within strata; sum (Z - Zbar)(y - ybar) = sum (Z - Zbar) y.
    zc = z - (mm / nn)[labels]
    w = coef[labels] * zc
    estimates = np.empty(replicates)
    for rep in range(replicates):
        e = rng.standard_normal((2, size))
        eps = sigma_R * e[0]
        xi = sigma_D * (corr * e[0] + math.sqrt(1 - corr**2) * e[1])
        d = tau_i[labels] + gamma_fs * z + xi
        r = alpha_i[labels] + beta * d + eps
        estimates[rep] = (w @ r) / (w @ d)
    theory = asymptotic_variance(EfficiencyInputs(n, m, sigma_R, gamma_fs))
    return VarianceCheck(theory, float(np.var(estimates, ddof=1)), k, gamma_fs, replicates)


@dataclass(frozen=True)
class EfficiencyRow:
    cap: int | None
    mad: float
    standardized_bias: float
    histogram: dict
    failures: int


def efficiency_balance_study(
    cohort: Cohort,
    caps: Sequence[int | None],
    replicates: int = 1000,
    seed=0,
    beta: float = 0.32,
    gamma_fs: float = -0.20,
    alpha_mean: float = -1.67,
    alpha_var: float = 0.12,
    tau_mean: float = -0.19,
    tau_var: float = 0.027,
) -> list[EfficiencyRow]:
    """Efficiency/balance trade-off across strata-size caps.

    For each cap ``s`` (``None`` = unrestricted) the cohort is full-matched with
    at most ``s - 1`` subjects on either side of a stratum's singleton.  Then,
    with the match fixed, exposures and binary outcomes are simulated as
    ``D ~ Poisson(exp(tau_i + gamma Z))`` and
    ``R ~ Bernoulli(expit(alpha_i + beta D))`` with stratum intercepts redrawn
    every replicate.  Each row reports the median absolute deviation of the
    effect-ratio estimate and the after-matching standardized difference of
    the propensity logits.
    """
    rows = []
    z = cohort.instrument
    for cap in caps:
        constraints = MatchConstraints() if cap is None or cap >= len(cohort) else MatchConstraints.max_size(cap)
        pipe = match_cohort(cohort, constraints)
        labels = pipe.match.labels(cohort)
        k = len(pipe.match)
        report = standardized_differences(cohort, pipe.match, pipe.design, pipe.propensity.fitted_logits)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0 if cap is None else int(cap),)))
        est = np.full(replicates, np.nan)
        for rep in range(replicates):
            a_i = rng.normal(alpha_mean, math.sqrt(alpha_var), k)[labels]
            t_i = rng.normal(tau_mean, math.sqrt(tau_var), k)[labels]
            d = rng.poisson(np.exp(t_i + gamma_fs * z)).astype(float)
            r = (rng.random(z.size) < expit(a_i + beta * d)).astype(float)
            try:
                est[rep] = StratifiedSample(z, r, d, labels).estimate()
            except FmivError:
                pass
        ok = est[np.isfinite(est)]
        mad = float(np.median(np.abs(ok - np.median(ok)))) if ok.size else math.nan
        rows.append(
            EfficiencyRow(cap, mad, report.propensity.std_diff_after, strata_histogram(pipe.match).histogram, int((~np.isfinite(est)).sum()))
        )
    return rows


def malaria_like_cohort(seed=0, n_total: int = 884, n_treated: int = 110, shift: float = 0.5) -> Cohort:
    """Synthetic stand-in with the motivating study's size and treated share.

    Five covariates, the first two shifted for instrument-1 subjects, and about
    5% of cells in the last covariate missing.
    """
    rng = np.random.default_rng(seed)
    z = np.zeros(n_total, dtype=int)
    z[rng.permutation(n_total)[:n_treated]] = 1
    x = rng.standard_normal((n_total, N_COVARIATES))
    x[:, 0] += shift * z
    x[:, 1] += 0.5 * shift * z
    x[:, 2] = np.round(x[:, 2])
    x[rng.random(n_total) < 0.05, 4] = np.nan
    return Cohort.from_arrays(z, np.zeros(n_total), np.zeros(n_total), x)


__all__ = [
    "F_KINDS",
    "SimulationPlan",
    "SimulationReport",
    "EstimatorSummary",
    "EfficiencyInputs",
    "EfficiencyRow",
    "VarianceCheck",
    "asymptotic_variance",
    "concentration_parameter",
    "efficiency_balance_study",
    "enumerate_assignments",
    "enumerated_moments",
    "generate_replicate",
    "homoscedastic_factor",
    "malaria_like_cohort",
    "outcome_function",
    "pairs_dominant_strata",
    "regression_concentration",
    "replicate_seed",
    "run_replicate",
    "run_study",
    "simulate_estimator_variance",
]
