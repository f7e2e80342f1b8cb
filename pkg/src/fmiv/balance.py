"""Absolute standardized differences before and after matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, FullMatch
from .exceptions import ValidationError

WEIGHTINGS = ("population", "treated")


@dataclass(frozen=True)
class CovariateBalance:
    """One balance row.

    ``flagged`` marks a covariate whose pooled SD is zero while the arm means
    differ; its differences are reported as ``inf``.
    """

    name: str
    std_diff_before: float
    std_diff_after: float
    flagged: bool = False


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[CovariateBalance, ...]
    propensity: CovariateBalance | None = None
    weighting: str = "population"
    propensity_scale: str = "logit"

    def row(self, name: str) -> CovariateBalance:
        for r in self.all_rows():
            if r.name == name:
                return r
        raise KeyError(name)

    def all_rows(self) -> tuple[CovariateBalance, ...]:
        return self.rows + ((self.propensity,) if self.propensity is not None else ())


@dataclass(frozen=True)
class GateResult:
    passed: bool
    failing: tuple[str, ...]
    threshold: float


def _balance_row(name, x, z, labels, n_strata, weighting) -> CovariateBalance:
    t, c = x[z == 1], x[z == 0]
    s = np.sqrt((np.var(t, ddof=1 if t.size > 1 else 0) + np.var(c, ddof=1 if c.size > 1 else 0)) / 2)
    raw_before = abs(t.mean() - c.mean())
    sum_t = np.bincount(labels, weights=x * z, minlength=n_strata)
    sum_c = np.bincount(labels, weights=x * (1 - z), minlength=n_strata)
    m = np.bincount(labels, weights=z, minlength=n_strata)
    n = np.bincount(labels, minlength=n_strata)
    gap = sum_t / m - sum_c / (n - m)
    w = n / n.sum() if weighting == "population" else m / m.sum()
    raw_after = abs(float(np.dot(w, gap)))
    if s > 0:
        return CovariateBalance(name, float(raw_before / s), float(raw_after / s))
    # No spread before matching: equal means are perfectly balanced.
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(x))))
    before = 0.0 if raw_before <= tiny else np.inf
    after = 0.0 if raw_after <= tiny else np.inf
    return CovariateBalance(name, before, after, flagged=bool(np.isinf(before) or np.isinf(after)))


def standardized_differences(
    cohort: Cohort,
    match: FullMatch | None,
    design,
    logits=None,
    weighting: str = "population",
    names=None,
) -> BalanceReport:
    """Balance of every design column, and of the propensity logits if given.

    before = |mean_T - mean_C| / s with s = sqrt((var_T + var_C) / 2) over the
    unmatched cohort.  after = |sum_i w_i (mean_T,i - mean_C,i)| / s with the
    same s; ``w_i = n_i / N`` (``weighting="population"``) or ``m_i / M``
    (``weighting="treated"``).  Without a match the whole cohort is treated as
    one stratum, so after equals before.

    Args:
        cohort: The cohort; only the instrument is used.
        match: A full match, or ``None``.
        design: ``Design`` or an (N, p) array without missing cells.
        logits: Fitted propensity logits for the propensity row.
        weighting: ``"population"`` or ``"treated"``.
        names: Column labels when ``design`` is a bare array.
    """
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"weighting must be one of {WEIGHTINGS}")
    matrix = np.asarray(getattr(design, "matrix", design), dtype=float)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if names is None:
        names = getattr(design, "columns", None) or tuple(f"x{k + 1}" for k in range(matrix.shape[1]))
    if matrix.shape[0] != len(cohort) or not np.all(np.isfinite(matrix)):
        raise ValidationError("design must have one finite row per subject")
    z = cohort.instrument.astype(float)
    if match is None:
        labels = np.zeros(len(cohort), dtype=np.int64)
        n_strata = 1
    else:
        labels = match.labels(cohort)
        if labels.min() < 0:
            raise ValidationError("match does not cover the cohort")
        n_strata = len(match)
    rows = tuple(_balance_row(nm, matrix[:, k], z, labels, n_strata, weighting) for k, nm in enumerate(names))
    prop = None
    if logits is not None:
        prop = _balance_row("propensity", np.asarray(logits, dtype=float), z, labels, n_strata, weighting)
    return BalanceReport(rows, prop, weighting)


def balance_gate(report: BalanceReport, threshold: float = 0.1) -> GateResult:
    """Fail every covariate whose after-matching difference is nonzero and at least ``threshold``."""
    if threshold < 0:
        raise ValidationError("threshold must be non-negative")
    failing = tuple(r.name for r in report.rows if r.std_diff_after > 0 and r.std_diff_after >= threshold)
    return GateResult(not failing, failing, threshold)


def format_report(report: BalanceReport) -> str:
    lines = ["covariate,std_diff_before,std_diff_after,flagged"]
    for r in report.all_rows():
        lines.append(f"{r.name},{r.std_diff_before:.6f},{r.std_diff_after:.6f},{int(r.flagged)}")
    return "\n".join(lines) + "\n"
