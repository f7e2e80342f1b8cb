import math

import numpy as np
import pytest

from fmiv.distance import DistanceMatrix, apply_caliper, dump_distances, rank_mahalanobis
from fmiv.exceptions import ValidationError


def _average_ranks(col):
    # Plain O(n^2) definition: rank = 1 + #smaller + (#ties - 1) / 2.
    col = np.asarray(col)
    return np.array([1 + np.sum(col < v) + (np.sum(col == v) - 1) / 2 for v in col])


def _oracle(x, treated, control):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    ranks = np.column_stack([_average_ranks(x[:, k]) for k in range(x.shape[1])])
    centered = ranks - ranks.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    sd = np.sqrt(np.diag(cov))
    target = math.sqrt((n * n - 1) / 12)
    scale = np.where(sd > 0, target / np.where(sd > 0, sd, 1), 0)
    cov = cov * np.outer(scale, scale)
    prec = np.linalg.pinv(cov)
    out = np.empty((len(treated), len(control)))
    for a, t in enumerate(treated):
        for b, c in enumerate(control):
            d = ranks[t] - ranks[c]
            out[a, b] = math.sqrt(max(d @ prec @ d, 0.0))
    return out


def test_three_point_example():
    dm = rank_mahalanobis(np.array([[1.0], [2.0], [3.0]]), [0], [1, 2])
    assert dm.values[0, 1] ** 2 == pytest.approx(6.0, rel=1e-12)
    assert dm.values[0, 0] ** 2 == pytest.approx(1.5, rel=1e-12)


def test_identical_subjects_are_at_distance_zero():
    x = np.array([[1.0, 4.0], [1.0, 4.0], [2.0, 0.0], [3.0, 1.0]])
    dm = rank_mahalanobis(x, [0, 2], [1, 3])
    assert dm.values[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_duplicate_columns_match_single_column():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 1))
    single = rank_mahalanobis(x, range(4), range(4, 12))
    double = rank_mahalanobis(np.hstack([x, x]), range(4), range(4, 12))
    np.testing.assert_allclose(double.values, single.values, atol=1e-9)


def test_agrees_with_direct_quadratic_form():
    rng = np.random.default_rng(1)
    x = np.round(rng.normal(size=(30, 4)), 1)  # rounding creates ties
    x[:, 3] = rng.integers(0, 2, 30)
    treated, control = list(range(0, 30, 3)), [i for i in range(30) if i % 3]
    dm = rank_mahalanobis(x, treated, control)
    np.testing.assert_allclose(dm.values, _oracle(x, treated, control), atol=1e-9)


def test_affine_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    y = x * np.array([3.0, 0.01, 7.0]) + np.array([5.0, -2.0, 0.0])
    a = rank_mahalanobis(x, range(5), range(5, 20))
    b = rank_mahalanobis(y, range(5), range(5, 20))
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_swapping_subjects_swaps_entries():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 2))
    a = rank_mahalanobis(x, [0, 1, 2], range(3, 10))
    b = rank_mahalanobis(x, [2, 1, 0], range(3, 10))
    np.testing.assert_allclose(b.values, a.values[::-1], atol=1e-12)


def test_constant_design_is_flagged():
    dm = rank_mahalanobis(np.ones((4, 2)), [0, 1], [2, 3])
    assert "constant-design" in dm.flags
    assert not dm.values.any()


def test_too_few_subjects():
    with pytest.raises(ValidationError):
        rank_mahalanobis(np.ones((1, 1)), [0], [])


def test_caliper_inside_and_zero_penalty():
    dm = DistanceMatrix.from_values([[1.0, 2.0]])
    logits = np.array([0.0, 0.01, 5.0])
    inside = apply_caliper(dm, logits, 0.2, penalty=1000)
    assert inside.values[0, 0] == 1.0
    assert inside.caliper_violations == 1
    unchanged = apply_caliper(dm, logits, 0.2, penalty=0)
    np.testing.assert_array_equal(unchanged.values, dm.values)


def test_gap_of_two_calipers_adds_the_penalty():
    dm = DistanceMatrix.from_values([[3.0]])
    logits = np.array([0.0, 1.0])
    # SD of (0, 1) is 1/sqrt(2); this width makes the caliper 0.5, half the gap.
    out = apply_caliper(dm, logits, width_sd=math.sqrt(0.5), penalty=1000)
    assert out.caliper == pytest.approx(0.5)
    assert out.values[0, 0] - 3.0 == pytest.approx(1000.0, rel=1e-12)


def test_penalty_monotone():
    rng = np.random.default_rng(4)
    dm = DistanceMatrix.from_values(rng.random((4, 6)))
    logits = rng.normal(size=10)
    prev = dm.values
    for pen in (0.0, 0.5, 1.0, 10.0, 1000.0):
        cur = apply_caliper(dm, logits, 0.2, penalty=pen).values
        assert np.all(cur >= prev)
        prev = cur


def test_default_penalty_and_disabled_caliper():
    dm = DistanceMatrix.from_values([[1.0, 2.0]])
    out = apply_caliper(dm, np.array([0.0, 0.0, 3.0]))
    assert out.penalty == pytest.approx(200.0)
    flat = apply_caliper(dm, np.zeros(3))
    assert "caliper-disabled" in flat.flags
    np.testing.assert_array_equal(flat.values, dm.values)
    with pytest.raises(ValidationError):
        apply_caliper(dm, np.zeros(3), width_sd=0)


def test_dump(tmp_path):
    dm = DistanceMatrix.from_values([[0.5, 1.5]])
    dump_distances(dm, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text() == "treated,c1,c2\nt1,0.5,1.5\n"
