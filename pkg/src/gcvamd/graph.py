"""Weighted causal graphs: acyclicity penalty, dual schedule, binarization, SHD.

The learnable structure is a d x d weight matrix A with a hard-zero diagonal.
Acyclicity is measured by the trace-of-matrix-exponential penalty
h(A) = tr(e^(A o A)) - d, which is zero exactly when the nonzero pattern of A
is a DAG.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WeightedAdjacency",
    "BinaryGraph",
    "AugLagState",
    "matrix_exponential",
    "acyclicity_h",
    "acyclicity_grad",
    "binarize_top_fraction",
    "shd",
    "auglag_update",
]


@dataclass(frozen=True)
class WeightedAdjacency:
    """d x d real weight matrix; entry w[i, j] is the weight of edge i -> j.

    The diagonal is hard-masked to zero at construction (self-loops are
    meaningless in an SCM) and the stored matrix is an immutable copy.
    """

    d: int
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (self.d, self.d):
            raise ValueError(f"expected ({self.d}, {self.d}) matrix, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("adjacency weights must be finite")
        w = w.copy()
        np.fill_diagonal(w, 0.0)
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls, d):
        return cls(d=d, w=np.zeros((d, d)))


@dataclass(frozen=True)
class BinaryGraph:
    """Directed graph on d nodes as a set of (i, j) edges, no self-loops."""

    d: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop ({i}, {i}) not allowed")
            if not (0 <= i < self.d and 0 <= j < self.d):
                raise ValueError(f"edge ({i}, {j}) out of range for d={self.d}")
        object.__setattr__(self, "edges", edges)

    def adjacency(self):
        a = np.zeros((self.d, self.d), dtype=np.int64)
        for i, j in self.edges:
            a[i, j] = 1
        return a

    def to_text(self):
        lines = [f"d={self.d}"]
        lines += [f"{i} {j}" for i, j in sorted(self.edges)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("d="):
            raise ValueError("edge list must start with a 'd=<n>' header")
        d = int(lines[0][2:])
        edges = set()
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"malformed edge line: {ln!r}")
            edges.add((int(parts[0]), int(parts[1])))
        return cls(d=d, edges=frozenset(edges))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class AugLagState:
    """Dual state (alpha, rho) of the augmented-Lagrangian DAG constraint.

    rho grows by factor beta whenever the constraint value fails to decay
    below gamma times its previous value; alpha accumulates rho * h.
    """

    alpha: float = 0.6
    rho: float = 0.1
    beta: float = 1.01
    gamma: float = 0.9
    h_prev: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.beta <= 1:
            raise ValueError("beta must be > 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.h_prev < 0:
            raise ValueError("h_prev must be >= 0")


def auglag_update(state, h_new):
    """One dual update from a freshly measured constraint value.

    alpha' = alpha + rho * h_new; rho grows by beta iff |h_new| has not
    decayed below gamma * |h_prev|. rho never decreases.
    """
    if h_new < 0:
        raise ValueError(
            f"constraint value must be >= 0, got {h_new} "
            "(negative h signals an acyclicity-evaluation bug)"
        )
    alpha = state.alpha + state.rho * h_new
    rho = state.rho * state.beta if abs(h_new) >= state.gamma * abs(state.h_prev) else state.rho
    return AugLagState(alpha=alpha, rho=rho, beta=state.beta, gamma=state.gamma, h_prev=h_new)


def matrix_exponential(b):
    """e^B by scaling-and-squaring with a truncated Taylor core.

    B is scaled by 2^-s until its infinity norm is <= 0.5, the series is
    summed until terms fall below 1e-12 relative, and the result is squared
    s times. Adequate and fast for the d <= 8 matrices used here.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("matrix entries must be finite")
    n = b.shape[0]
    norm = np.linalg.norm(b, np.inf)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    m = b / (2.0**s)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = term @ m / k
        result = result + term
        if np.linalg.norm(term, np.inf) <= 1e-12 * max(1.0, np.linalg.norm(result, np.inf)):
            break
    for _ in range(s):
        result = result @ result
    return result


def acyclicity_h(a):
    """tr(e^(A o A)) - d; >= 0, and 0 iff the nonzero pattern of A is acyclic."""
    w = a.w if isinstance(a, WeightedAdjacency) else np.asarray(a, dtype=np.float64)
    d = w.shape[0]
    return float(np.trace(matrix_exponential(w * w)) - d)


def acyclicity_grad(a):
    """Gradient of acyclicity_h with respect to A: (e^(A o A))^T o 2A."""
    w = a.w if isinstance(a, WeightedAdjacency) else np.asarray(a, dtype=np.float64)
    return matrix_exponential(w * w).T * (2.0 * w)


def binarize_top_fraction(a, fraction):
    """Keep the ceil(fraction * d(d-1)) largest off-diagonal |weights| as edges.

    Ties are broken deterministically by row-major position (smaller (i, j)
    wins), so repeated calls always return the same graph.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    d = a.d
    k = math.ceil(fraction * d * (d - 1))
    candidates = sorted(
        ((-abs(a.w[i, j]), i, j) for i in range(d) for j in range(d) if i != j)
    )
    edges = frozenset((i, j) for _, i, j in candidates[:k])
    return BinaryGraph(d=d, edges=edges)


def shd(g1, g2):
    """Structural Hamming distance between two directed graphs.

    Minimum number of edge insertions, deletions, and reversals turning g1
    into g2; an edge present as i->j in one graph and j->i in the other
    counts as a single reversal. Symmetric in its arguments.
    """
    if g1.d != g2.d:
        raise ValueError(f"graphs have different node counts: {g1.d} != {g2.d}")
    total = 0
    for i in range(g1.d):
        for j in range(i + 1, g1.d):
            s1 = {(i, j), (j, i)} & g1.edges
            s2 = {(i, j), (j, i)} & g2.edges
            if len(s1) == 1 and len(s2) == 1 and s1 != s2:
                total += 1  # pure reversal
            else:
                total += len(s1 ^ s2)
    return total
