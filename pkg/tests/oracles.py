"""Independent brute-force oracles used only by the tests."""

import itertools
import math

import numpy as np


def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1 :]


def brute_force_full_match(cost, max_controls=None, max_treated=None):
    """Minimum total cost over all full matches of a small integer cost matrix.

    Subjects 0..a-1 are treated, a..a+b-1 controls.  Returns (cost, blocks).
    """
    cost = np.asarray(cost)
    a, b = cost.shape
    best, best_blocks = math.inf, None
    for part in set_partitions(range(a + b)):
        total = 0
        ok = True
        for block in part:
            ts = [u for u in block if u < a]
            cs = [u - a for u in block if u >= a]
            if not ts or not cs or (len(ts) > 1 and len(cs) > 1):
                ok = False
                break
            if len(ts) == 1 and max_controls is not None and len(cs) > max_controls:
                ok = False
                break
            if len(cs) == 1 and max_treated is not None and len(ts) > max_treated:
                ok = False
                break
            total += sum(int(cost[t, c]) for t in ts for c in cs)
            if total >= best:
                ok = False
                break
        if ok and total < best:
            best, best_blocks = total, part
    return best, best_blocks


def enumerate_within_strata(labels, m):
    """All instrument vectors with m[k] ones inside each stratum k."""
    labels = np.asarray(labels)
    groups = [np.flatnonzero(labels == k) for k in range(len(m))]
    choices = [list(itertools.combinations(g.tolist(), mk)) for g, mk in zip(groups, m)]
    for combo in itertools.product(*choices):
        z = np.zeros(labels.size, dtype=int)
        for picked in combo:
            z[list(picked)] = 1
        yield z
