"""Treated-by-control distance matrices.

The rank-based Mahalanobis distance replaces each covariate by its average
ranks, rescales the rank covariance so every column carries the variance of an
untied ranking, and measures distances in the resulting metric.  A soft
propensity caliper then adds a penalty proportional to how far a pair's logit
gap exceeds the caliper width.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .exceptions import ValidationError


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense distances with rows for instrument-1 and columns for instrument-0 subjects.

    ``treated_index`` and ``control_index`` locate rows and columns in the
    cohort.  ``flags`` carries non-fatal conditions such as a disabled caliper.
    """

    treated_ids: tuple[str, ...]
    control_ids: tuple[str, ...]
    values: np.ndarray
    treated_index: np.ndarray
    control_index: np.ndarray
    caliper_violations: int = 0
    caliper: float | None = None
    penalty: float | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        v = self.values
        if v.shape != (len(self.treated_ids), len(self.control_ids)):
            raise ValidationError("distance matrix shape does not match the id lists")
        if not np.all(np.isfinite(v)) or (v.size and v.min() < 0):
            raise ValidationError("distances must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_values(cls, values, treated_ids=None, control_ids=None) -> "DistanceMatrix":
        """Wrap a bare matrix; ids default to ``t1..`` and ``c1..``."""
        v = np.asarray(values, dtype=float)
        a, b = v.shape
        treated_ids = tuple(treated_ids or (f"t{i + 1}" for i in range(a)))
        control_ids = tuple(control_ids or (f"c{j + 1}" for j in range(b)))
        return cls(treated_ids, control_ids, v, np.arange(a), np.arange(a, a + b))


def rank_transform(design) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks per column and the pseudo-inverse of the rescaled rank covariance."""
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValidationError("rank distance needs at least two subjects")
    if x.shape[1] == 0:
        return np.zeros((n, 0)), np.zeros((0, 0))
    ranks = rankdata(x, axis=0, method="average")
    cov = np.atleast_2d(np.cov(ranks, rowvar=False, bias=True))
    diag = np.diag(cov)
    untied = (n * n - 1) / 12.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(diag > 0, np.sqrt(untied / diag), 0.0)
    cov = cov * np.outer(ratio, ratio)
    return ranks, np.linalg.pinv(cov, hermitian=True)


def rank_mahalanobis(design, treated, control, ids=None) -> DistanceMatrix:
    """Rank-based Mahalanobis distances between two index sets of ``design`` rows.

    Parameters
    ----------
    design : array (N, p) or Design
        Covariates without missing cells.  Ranks are taken over all N rows.
    treated, control : sequence of int
        Row indices of the instrument-1 and instrument-0 subjects.
    ids : sequence of str, optional
        Subject ids for all N rows; row numbers are used otherwise.

    Notes
    -----
    With ``Sigma`` the rescaled rank covariance,
    ``d(t, c)^2 = (r_t - r_c)' pinv(Sigma) (r_t - r_c)``.  The matrix stores
    ``d``, not ``d^2``.  A design with no varying column yields all-zero
    distances and the ``constant-design`` flag.
    """
    matrix = getattr(design, "matrix", design)
    treated = np.asarray(treated, dtype=int)
    control = np.asarray(control, dtype=int)
    ranks, precision = rank_transform(matrix)
    n = ranks.shape[0]
    if ids is None:
        ids = [str(i + 1) for i in range(n)]
    flags = ()
    if precision.size == 0 or not np.any(precision):
        values = np.zeros((treated.size, control.size))
        flags = ("constant-design",)
    else:
        # Whitening by a symmetric square root of the precision turns the
        # quadratic form into a Euclidean distance.
        evals, evecs = np.linalg.eigh(precision)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        y = ranks @ root
        values = cdist(y[treated], y[control])
    return DistanceMatrix(
        tuple(ids[i] for i in treated),
        tuple(ids[j] for j in control),
        values,
        treated,
        control,
        flags=flags,
    )


def apply_caliper(dm: DistanceMatrix, logits, width_sd: float = 0.2, penalty: float | None = None) -> DistanceMatrix:
    """Add a soft propensity caliper.

    The caliper is ``width_sd`` times the standard deviation of all fitted logits.
    Pairs whose logit gap exceeds it get ``penalty * (gap - caliper) / caliper``
    added.  ``penalty`` defaults to 100 times the largest raw distance.

    Args:
        dm: Raw distances.
        logits: Fitted logits for every cohort subject, indexed like the cohort.
        width_sd: Caliper width in logit standard deviations; must be positive.
        penalty: Non-negative penalty scale.

    Returns:
        A new matrix.  When all logits are equal the caliper cannot be formed;
        the input is returned with the ``caliper-disabled`` flag.
    """
    if not width_sd > 0:
        raise ValidationError("caliper width must be positive")
    if penalty is None:
        penalty = 100.0 * float(dm.values.max()) if dm.values.size else 0.0
    if penalty < 0:
        raise ValidationError("caliper penalty must be non-negative")
    logits = np.asarray(logits, dtype=float)
    sd = float(np.std(logits, ddof=1)) if logits.size > 1 else 0.0
    if not sd > 0:
        return replace(dm, flags=dm.flags + ("caliper-disabled",))
    caliper = width_sd * sd
    gap = np.abs(logits[dm.treated_index][:, None] - logits[dm.control_index][None, :])
    excess = np.clip(gap - caliper, 0.0, None)
    violations = int(np.count_nonzero(excess))
    values = dm.values + penalty * excess / caliper if penalty > 0 else dm.values
    return replace(dm, values=values, caliper_violations=violations, caliper=caliper, penalty=float(penalty))


def dump_distances(dm: DistanceMatrix, path: str | Path) -> None:
    """Write the matrix as comma-separated text with id headers."""
    with open(path, "w") as fh:
        fh.write("treated," + ",".join(dm.control_ids) + "\n")
        for tid, row in zip(dm.treated_ids, dm.values):
            fh.write(tid + "," + ",".join(repr(float(v)) for v in row) + "\n")
