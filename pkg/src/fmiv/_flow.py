"""Compiled min-cost flow kernels.

Both solvers are successive-shortest-augmenting-path methods that keep node
potentials so every shortest-path search runs on non-negative reduced costs.
All costs are 64-bit integers, so results are exact.
"""

import numpy as np
from numba import njit

INF = np.int64(2**62)


@njit(cache=True)
def assignment(cost):
    """Minimum-cost assignment of every row of an (n, m) matrix, n <= m.

    Rows are inserted one at a time; each insertion grows a shortest-path tree
    over columns with reduced costs ``cost - u - v`` and augments along the
    cheapest alternating path.  Ties go to the lowest column index.

    Returns (row_to_col, augmentations, scans).
    """
    n, m = cost.shape
    u = np.zeros(n + 1, np.int64)
    v = np.zeros(m + 1, np.int64)
    owner = np.zeros(m + 1, np.int64)  # owner[j]: 1-based row on column j, 0 if free
    way = np.zeros(m + 1, np.int64)
    minv = np.empty(m + 1, np.int64)
    used = np.empty(m + 1, np.bool_)
    scans = 0
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INF
            used[j] = False
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            scans += 1
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, np.int64)
    for j in range(1, m + 1):
        if owner[j] > 0:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, n, scans


@njit(cache=True)
def _heap_push(hk, hn, size, key, node):
    i = size
    hk[i] = key
    hn[i] = node
    while i > 0:
        p = (i - 1) >> 1
        if hk[p] < hk[i] or (hk[p] == hk[i] and hn[p] <= hn[i]):
            break
        hk[p], hk[i] = hk[i], hk[p]
        hn[p], hn[i] = hn[i], hn[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(hk, hn, size):
    key = hk[0]
    node = hn[0]
    size -= 1
    hk[0] = hk[size]
    hn[0] = hn[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and (hk[right] < hk[left] or (hk[right] == hk[left] and hn[right] < hn[left])):
            best = right
        if hk[i] < hk[best] or (hk[i] == hk[best] and hn[i] <= hn[best]):
            break
        hk[i], hk[best] = hk[best], hk[i]
        hn[i], hn[best] = hn[best], hn[i]
        i = best
    return key, node, size


@njit(cache=True)
def min_cost_flow(n_nodes, tail, head, cap, cost, source, sink, demand):
    """Send ``demand`` units from ``source`` to ``sink`` at minimum cost.

    Arcs are given in the order their adjacency should be scanned; arc ``e`` has
    residual twin ``e ^ 1`` (callers pass forward arcs at even positions).
    Dijkstra stops as soon as the sink is settled; unsettled nodes receive the
    sink distance as their potential increment, which keeps reduced costs
    non-negative.

    Returns (flow_on_arc, total_cost, augmentations, sent).
    """
    n_arcs = tail.shape[0]
    # CSR adjacency over residual arcs, preserving arc order within a node.
    start = np.zeros(n_nodes + 1, np.int64)
    for e in range(n_arcs):
        start[tail[e] + 1] += 1
    for v in range(n_nodes):
        start[v + 1] += start[v]
    adj = np.empty(n_arcs, np.int64)
    fill = start[:-1].copy()
    for e in range(n_arcs):
        adj[fill[tail[e]]] = e
        fill[tail[e]] += 1

    residual = cap.copy()
    pot = np.zeros(n_nodes, np.int64)
    dist = np.empty(n_nodes, np.int64)
    prev = np.empty(n_nodes, np.int64)
    done = np.empty(n_nodes, np.bool_)
    hk = np.empty(n_arcs + n_nodes, np.int64)
    hn = np.empty(n_arcs + n_nodes, np.int64)
    sent = 0
    total = 0
    augmentations = 0
    while sent < demand:
        for v in range(n_nodes):
            dist[v] = INF
            prev[v] = -1
            done[v] = False
        dist[source] = 0
        size = _heap_push(hk, hn, 0, 0, source)
        while size > 0:
            d, v, size = _heap_pop(hk, hn, size)
            if done[v] or d > dist[v]:
                continue
            done[v] = True
            if v == sink:
                break
            pv = pot[v]
            for k in range(start[v], start[v + 1]):
                e = adj[k]
                if residual[e] <= 0:
                    continue
                w = head[e]
                if done[w]:
                    continue
                nd = d + cost[e] + pv - pot[w]
                if nd < dist[w]:
                    dist[w] = nd
                    prev[w] = e
                    size = _heap_push(hk, hn, size, nd, w)
        if not done[sink]:
            break
        reach = dist[sink]
        for v in range(n_nodes):
            if dist[v] < reach:
                pot[v] += dist[v]
            else:
                pot[v] += reach
        push = demand - sent
        w = sink
        while w != source:
            e = prev[w]
            if residual[e] < push:
                push = residual[e]
            w = tail[e]
        w = sink
        while w != source:
            e = prev[w]
            residual[e] -= push
            residual[e ^ 1] += push
            total += push * cost[e]
            w = tail[e]
        sent += push
        augmentations += 1
    flow = cap - residual
    return flow, total, augmentations, sent
