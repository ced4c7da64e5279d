"""Shared test utilities: finite differences and graph generators."""

import numpy as np

from gcvamd.graph import BinaryGraph, WeightedAdjacency


def central_fd_matrix(f, w, step=1e-5):
    """Central finite-difference gradient of scalar f over matrix entries."""
    g = np.zeros_like(w, dtype=np.float64)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            wp = w.copy()
            wm = w.copy()
            wp[i, j] += step
            wm[i, j] -= step
            g[i, j] = (f(wp) - f(wm)) / (2 * step)
    return g


def rel_fro_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def random_dag_adjacency(rng, d, p=0.5, low=0.1, high=1.0):
    """Random weighted DAG: edges only forward along a random node order."""
    order = rng.permutation(d)
    w = np.zeros((d, d))
    for a in range(d):
        for b in range(a + 1, d):
            if rng.random() < p:
                sign = rng.choice([-1.0, 1.0])
                w[order[a], order[b]] = sign * rng.uniform(low, high)
    return WeightedAdjacency(d=d, w=w)


def random_cyclic_adjacency(rng, d, min_weight=0.1):
    """Random weighted graph guaranteed to contain a directed cycle.

    A cycle of length 2 or 3 with edge magnitudes >= min_weight is planted
    on top of a random DAG.
    """
    base = random_dag_adjacency(rng, d, p=0.3, low=min_weight, high=1.0).w.copy()
    length = int(rng.integers(2, 4))
    nodes = rng.choice(d, size=length, replace=False)
    for k in range(length):
        i, j = nodes[k], nodes[(k + 1) % length]
        sign = rng.choice([-1.0, 1.0])
        base[i, j] = sign * rng.uniform(min_weight, 1.0)
    return WeightedAdjacency(d=d, w=base)


def shd_bruteforce(g1, g2):
    """Breadth-first search over edge sets; moves are insert, delete, reverse."""
    d = g1.d
    all_edges = [(i, j) for i in range(d) for j in range(d) if i != j]
    start = frozenset(g1.edges)
    goal = frozenset(g2.edges)
    frontier = {start}
    seen = {start}
    dist = 0
    while goal not in frontier:
        nxt = set()
        for state in frontier:
            for e in all_edges:
                i, j = e
                if e in state:
                    nxt.add(state - {e})  # delete
                    if (j, i) not in state:
                        nxt.add((state - {e}) | {(j, i)})  # reverse
                else:
                    nxt.add(state | {e})  # insert
        frontier = nxt - seen
        seen |= frontier
        dist += 1
        if dist > 2 * len(all_edges):
            raise RuntimeError("BFS failed to reach goal")
    return dist


def graph_from_bits(d, bits):
    all_edges = [(i, j) for i in range(d) for j in range(d) if i != j]
    edges = frozenset(e for k, e in enumerate(all_edges) if bits >> k & 1)
    return BinaryGraph(d=d, edges=edges)
