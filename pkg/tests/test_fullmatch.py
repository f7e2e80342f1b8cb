import numpy as np
import pytest

from fmiv.data import Cohort, validate_full_match
from fmiv.distance import DistanceMatrix
from fmiv.exceptions import InfeasibleMatchError, ValidationError
from fmiv.fullmatch import (
    MatchConstraints,
    _cover_by_flow,
    integer_costs,
    match_cohort,
    optimal_full_match,
    strata_histogram,
)
from fmiv.simulation import SimulationPlan, generate_replicate, malaria_like_cohort

from oracles import brute_force_full_match


def _cohort_for(dm):
    a, b = dm.shape
    return Cohort.from_arrays([1] * a + [0] * b, [0] * (a + b), [0] * (a + b), ids=list(dm.treated_ids + dm.control_ids))


def _strata(result):
    return {frozenset(s.members) for s in result.match.strata}


def test_zero_cost_pairing():
    res = optimal_full_match(DistanceMatrix.from_values([[0, 5], [5, 0]]))
    assert _strata(res) == {frozenset({"t1", "c1"}), frozenset({"t2", "c2"})}
    assert res.total_distance == 0


def test_single_treated_takes_every_control():
    res = optimal_full_match(DistanceMatrix.from_values([[1.0, 2.0, 4.0]]))
    assert _strata(res) == {frozenset({"t1", "c1", "c2", "c3"})}
    assert res.total_distance == pytest.approx(7.0)


@pytest.mark.parametrize("seed", range(10))
def test_three_by_five_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 20, size=(3, 5)).astype(float)
    res = optimal_full_match(DistanceMatrix.from_values(values))
    best, _ = brute_force_full_match(values.astype(int))
    assert res.total_distance == best
    validate_full_match(res.match, _cohort_for(DistanceMatrix.from_values(values)))


def test_small_instances_with_caps_match_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(40):
        a = int(rng.integers(1, 5))
        b = int(rng.integers(1, 9 - a))
        values = rng.integers(0, 9, size=(a, b))
        kc = int(rng.integers(1, 4))
        kt = int(rng.integers(1, 4))
        cons = MatchConstraints(kc, kt)
        best, _ = brute_force_full_match(values, kc, kt)
        if best == float("inf"):
            with pytest.raises(InfeasibleMatchError):
                optimal_full_match(DistanceMatrix.from_values(values.astype(float)), cons)
            continue
        try:
            res = optimal_full_match(DistanceMatrix.from_values(values.astype(float)), cons)
        except InfeasibleMatchError:
            pytest.fail("solver declared a feasible instance infeasible")
        assert res.total_cost == best * 2**16


def test_network_and_assignment_routes_agree():
    rng = np.random.default_rng(5)
    for a, b in [(7, 30), (20, 20), (25, 6)]:
        values = rng.random((a, b)) * 10
        dm = DistanceMatrix.from_values(values)
        fast = optimal_full_match(dm)
        assert fast.solver_stats["route"] == "assignment"
        w = integer_costs(values)
        chosen, stats = _cover_by_flow(w, MatchConstraints())
        assert stats["route"] == "network"
        assert int(w[chosen].sum()) == fast.total_cost


def test_total_distance_is_sum_of_charged_edges():
    rng = np.random.default_rng(6)
    values = rng.random((6, 14))
    res = optimal_full_match(DistanceMatrix.from_values(values))
    ti, cj = res.edges.T
    assert res.total_distance == pytest.approx(values[ti, cj].sum())
    assert res.total_cost == integer_costs(values)[ti, cj].sum()
    # A tree per stratum: edges = subjects - strata.
    assert len(ti) == 20 - len(res.match)


def test_tightening_caps_never_lowers_cost():
    rng = np.random.default_rng(7)
    values = rng.random((10, 40))
    dm = DistanceMatrix.from_values(values)
    costs = [optimal_full_match(dm, MatchConstraints(k, None)).total_cost for k in (40, 10, 6, 5, 4)]
    assert costs == sorted(costs)


def test_scale_invariance_of_strata():
    rng = np.random.default_rng(8)
    values = rng.integers(1, 50, size=(5, 12)).astype(float)
    a = optimal_full_match(DistanceMatrix.from_values(values))
    b = optimal_full_match(DistanceMatrix.from_values(values * 3.0))
    assert _strata(a) == _strata(b)
    assert b.total_cost == 3 * a.total_cost


def test_deterministic():
    rng = np.random.default_rng(9)
    values = rng.integers(0, 3, size=(8, 20)).astype(float)  # many ties
    dm = DistanceMatrix.from_values(values)
    first = optimal_full_match(dm)
    for _ in range(3):
        assert optimal_full_match(dm).match == first.match


def test_infeasible_caps():
    dm = DistanceMatrix.from_values(np.ones((1, 7)))
    with pytest.raises(InfeasibleMatchError):
        optimal_full_match(dm, MatchConstraints(1, None))
    with pytest.raises(InfeasibleMatchError):
        optimal_full_match(DistanceMatrix.from_values(np.ones((0, 3))))


def test_cap_validation_and_total_size():
    assert MatchConstraints.max_size(9) == MatchConstraints(8, 8)
    assert MatchConstraints.max_size(None) == MatchConstraints()
    with pytest.raises(ValidationError):
        MatchConstraints(0, None)
    with pytest.raises(ValidationError):
        MatchConstraints.max_size(1)


def test_total_size_cap_is_respected():
    cohort = malaria_like_cohort(seed=2)
    pipe = match_cohort(cohort, MatchConstraints.max_size(9))
    assert max(s.n for s in pipe.match.strata) <= 9
    validate_full_match(pipe.match, cohort)


def test_pairs_only_histogram():
    res = optimal_full_match(DistanceMatrix.from_values(np.eye(4)[::-1] + 1))
    assert strata_histogram(res.match).histogram == {2: 4}


def test_malaria_scale_histogram():
    cohort = malaria_like_cohort(seed=0)
    pipe = match_cohort(cohort)
    diag = validate_full_match(pipe.match, cohort)
    assert sum(k * v for k, v in diag.histogram.items()) == 884
    assert diag.pairs + diag.one_treated + diag.one_control == diag.n_strata
    assert len(pipe.match) <= 110


def test_match_cohort_on_simulated_data_is_valid():
    plan = SimulationPlan()
    cohort = generate_replicate(plan, 3)
    pipe = match_cohort(cohort)
    validate_full_match(pipe.match, cohort)
    assert pipe.propensity.design_kind == "expanded"
