"""Optimal full matching by minimum-cost network flow.

A full match is a minimum-cost edge cover of the complete treated-control
bipartite graph: every subject must touch at least one chosen edge, and once
redundant edges are pruned each connected component is a star, i.e. a 1:k or
k:1 stratum.

Two exact routes are used, both successive shortest paths with potentials:

* Capped problems use the lower-bounded network.  Source to each treated node
  carries flow in ``[1, max_controls_per_treated]``, each treated-control edge
  has capacity 1 and cost ``round(d * 2**16)``, and each control to sink
  carries flow in ``[1, max_treated_per_control]``.  Lower bounds are removed
  by the usual circulation transformation.
* When no cap binds, a minimum edge cover costs ``sum_v mu(v)`` plus a minimum
  assignment on the reduced weights ``min(0, w - mu(t) - mu(c))``, where
  ``mu(v)`` is the cheapest edge at ``v``.  That assignment needs only
  ``min(#treated, #control)`` augmentations instead of ``max(...)``, which is
  what keeps large Monte Carlo studies fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _flow
from .data import Cohort, FullMatch, MatchDiagnostics, Stratum, _diagnostics
from .distance import DistanceMatrix, apply_caliper, rank_mahalanobis
from .exceptions import InfeasibleMatchError, ValidationError
from .propensity import Design, PropensityModel, expand_design, fit_propensity

SCALE = 2**16


@dataclass(frozen=True)
class MatchConstraints:
    """Per-side caps on stratum composition; ``None`` means unbounded.

    A cap ``s`` on total stratum size corresponds to
    ``MatchConstraints(s - 1, s - 1)``.
    """

    max_controls_per_treated: int | None = None
    max_treated_per_control: int | None = None

    def __post_init__(self):
        for cap in (self.max_controls_per_treated, self.max_treated_per_control):
            if cap is not None and cap < 1:
                raise ValidationError("strata caps must be at least 1")

    @classmethod
    def max_size(cls, size: int | None) -> "MatchConstraints":
        if size is None:
            return cls()
        if size < 2:
            raise ValidationError("a stratum needs at least two subjects")
        return cls(size - 1, size - 1)

    def check(self, n_treated: int, n_control: int) -> None:
        if n_treated < 1 or n_control < 1:
            raise InfeasibleMatchError("both instrument levels need at least one subject")
        kc, kt = self.max_controls_per_treated, self.max_treated_per_control
        if kc is not None and n_control > kc * n_treated:
            raise InfeasibleMatchError(
                f"{n_control} controls cannot be placed with at most {kc} per treated subject ({n_treated} treated)"
            )
        if kt is not None and n_treated > kt * n_control:
            raise InfeasibleMatchError(
                f"{n_treated} treated cannot be placed with at most {kt} per control subject ({n_control} controls)"
            )

    def binding(self, n_treated: int, n_control: int) -> bool:
        kc, kt = self.max_controls_per_treated, self.max_treated_per_control
        return (kc is not None and kc < n_control) or (kt is not None and kt < n_treated)


@dataclass(frozen=True)
class MatchResult:
    match: FullMatch
    total_distance: float
    total_cost: int
    edges: np.ndarray  # (k, 2) treated row, control column of kept edges
    solver_stats: dict = field(default_factory=dict)


def integer_costs(values) -> np.ndarray:
    """Distances scaled by 2**16 and rounded; differences below 2**-16 are ties."""
    return np.rint(np.asarray(values, dtype=float) * SCALE).astype(np.int64)


def _cover_by_assignment(w: np.ndarray):
    a, b = w.shape
    mu_t = w.min(axis=1)
    mu_c = w.min(axis=0)
    reduced = np.minimum(w - mu_t[:, None] - mu_c[None, :], 0)
    if a <= b:
        rows, augmentations, scans = _flow.assignment(reduced)
        pairs = [(i, int(j)) for i, j in enumerate(rows)]
    else:
        cols, augmentations, scans = _flow.assignment(np.ascontiguousarray(reduced.T))
        pairs = [(int(i), j) for j, i in enumerate(cols)]
    chosen = np.zeros((a, b), dtype=bool)
    for i, j in pairs:
        if reduced[i, j] < 0:
            chosen[i, j] = True
    free_t = ~chosen.any(axis=1)
    chosen[np.flatnonzero(free_t), np.argmin(w[free_t], axis=1)] = True
    free_c = ~chosen.any(axis=0)
    chosen[np.argmin(w[:, free_c], axis=0), np.flatnonzero(free_c)] = True
    stats = {"route": "assignment", "augmentations": int(augmentations), "iterations": int(scans)}
    return chosen, stats


def _cover_by_flow(w: np.ndarray, constraints: MatchConstraints):
    a, b = w.shape
    kc = constraints.max_controls_per_treated or b
    kt = constraints.max_treated_per_control or a
    kc, kt = min(kc, b), min(kt, a)
    big = a + b
    # Nodes: 0 super-source, 1 super-sink, 2 source, 3 sink, then treated, then controls.
    S, T, s, k = 0, 1, 2, 3
    tn = 4 + np.arange(a)
    cn = 4 + a + np.arange(b)
    tails, heads, caps, costs = [], [], [], []

    def add(u, v, c, w_):
        tails.append(np.atleast_1d(u))
        heads.append(np.atleast_1d(v))
        caps.append(np.broadcast_to(np.asarray(c, np.int64), np.atleast_1d(u).shape))
        costs.append(np.broadcast_to(np.asarray(w_, np.int64), np.atleast_1d(u).shape))

    add(np.full(a, S), tn, 1, 0)  # lower bound of source -> t
    add(np.full(a, s), tn, kc - 1, 0)  # remaining capacity of source -> t
    add(np.repeat(tn, b), np.tile(cn, a), 1, w.ravel())
    add(cn, np.full(b, T), 1, 0)  # lower bound of c -> sink
    add(cn, np.full(b, k), kt - 1, 0)  # remaining capacity of c -> sink
    add(S, k, b, 0)  # lower-bound excess on the sink
    add(s, T, a, 0)  # lower-bound deficit on the source
    add(k, s, big, 0)  # return arc closing the circulation
    ft = np.concatenate(tails).astype(np.int64)
    fh = np.concatenate(heads).astype(np.int64)
    fc = np.concatenate(caps).astype(np.int64)
    fw = np.concatenate(costs).astype(np.int64)
    m = ft.size
    tail = np.empty(2 * m, np.int64)
    head = np.empty(2 * m, np.int64)
    cap = np.zeros(2 * m, np.int64)
    cost = np.empty(2 * m, np.int64)
    tail[0::2], head[0::2], cap[0::2], cost[0::2] = ft, fh, fc, fw
    tail[1::2], head[1::2], cost[1::2] = fh, ft, -fw
    flow, total, augmentations, sent = _flow.min_cost_flow(4 + a + b, tail, head, cap, cost, S, T, a + b)
    if sent < a + b:
        raise InfeasibleMatchError("no full match satisfies the strata caps")
    lo = 2 * 2 * a
    chosen = (flow[lo : lo + 2 * a * b : 2] > 0).reshape(a, b)
    stats = {"route": "network", "augmentations": int(augmentations), "iterations": int(augmentations)}
    return chosen, stats


def _prune(chosen: np.ndarray) -> np.ndarray:
    """Drop edges whose endpoints are both covered elsewhere (only zero-cost ones in an optimum)."""
    chosen = chosen.copy()
    deg_t = chosen.sum(axis=1)
    deg_c = chosen.sum(axis=0)
    for i, j in zip(*np.nonzero(chosen)):
        if deg_t[i] >= 2 and deg_c[j] >= 2:
            chosen[i, j] = False
            deg_t[i] -= 1
            deg_c[j] -= 1
    return chosen


def optimal_full_match(dm: DistanceMatrix, constraints: MatchConstraints | None = None) -> MatchResult:
    """Minimum total-distance full match for a treated-by-control distance matrix.

    Parameters
    ----------
    dm : DistanceMatrix
    constraints : MatchConstraints, optional
        Unbounded by default.

    Returns
    -------
    MatchResult
        ``total_cost`` is the exact integer objective over ``round(d * 2**16)``
        costs and ``total_distance`` the matching sum of unscaled distances.

    Raises
    ------
    InfeasibleMatchError
        When a side is empty or the caps cannot be met.
    """
    constraints = constraints or MatchConstraints()
    a, b = dm.shape
    constraints.check(a, b)
    w = integer_costs(dm.values)
    if constraints.binding(a, b):
        chosen, stats = _cover_by_flow(w, constraints)
    else:
        chosen, stats = _cover_by_assignment(w)
    chosen = _prune(chosen)
    ti, cj = np.nonzero(chosen)
    graph = coo_matrix((np.ones(ti.size), (ti, a + cj)), shape=(a + b, a + b))
    _, comp = connected_components(graph, directed=False)
    # Number strata by their lowest treated row, then lowest control column.
    order = {}
    for c in comp.tolist():
        order.setdefault(c, len(order))
    members: list[list[str]] = [[] for _ in order]
    m_count = [0] * len(order)
    for i in range(a):
        lab = order[comp[i]]
        members[lab].append(dm.treated_ids[i])
        m_count[lab] += 1
    for j in range(b):
        members[order[comp[a + j]]].append(dm.control_ids[j])
    strata = tuple(Stratum(tuple(mem), m) for mem, m in zip(members, m_count))
    total_cost = int(w[chosen].sum())
    total_distance = float(dm.values[chosen].sum())
    return MatchResult(FullMatch(strata), total_distance, total_cost, np.column_stack([ti, cj]), stats)


def strata_histogram(match: FullMatch) -> MatchDiagnostics:
    """Histogram of stratum sizes with counts of pairs, 1:k and k:1 strata."""
    return _diagnostics(match, sum(st.n for st in match.strata))


@dataclass(frozen=True)
class MatchPipeline:
    """Everything the design stage produced, kept together for reporting."""

    result: MatchResult
    design: Design
    propensity: PropensityModel
    distances: DistanceMatrix

    @property
    def match(self) -> FullMatch:
        return self.result.match


def match_cohort(
    cohort: Cohort,
    constraints: MatchConstraints | None = None,
    caliper_sd: float | None = 0.2,
    penalty: float | None = None,
) -> MatchPipeline:
    """Propensity fit, rank Mahalanobis distance, soft caliper and optimal full match.

    Uses covariates and the instrument only.  ``caliper_sd=None`` or ``0``
    skips the caliper.
    """
    design = expand_design(cohort)
    model = fit_propensity(cohort, design)
    z = cohort.instrument
    treated = np.flatnonzero(z == 1)
    control = np.flatnonzero(z == 0)
    dm = rank_mahalanobis(design.matrix, treated, control, ids=cohort.ids)
    if caliper_sd:
        dm = apply_caliper(dm, model.fitted_logits, caliper_sd, penalty)
    result = optimal_full_match(dm, constraints)
    return MatchPipeline(result, design, model, dm)
