"""Communication topologies and symmetric stochastic mixing matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class Topology:
    """Undirected simple graph on agents ``0..n-1``; edges stored as ``(i, j)`` with ``i < j``."""

    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        normalized = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) outside 0..{self.n - 1}")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))
        adj = [[] for _ in range(self.n)]
        for i, j in normalized:
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))
        if not self.is_connected():
            raise ValueError("topology is not connected")

    def neighbors(self, i: int) -> tuple:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        rows = [i for i, j in self.edges] + [j for i, j in self.edges]
        cols = [j for i, j in self.edges] + [i for i, j in self.edges]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        count, _ = connected_components(graph, directed=False)
        return count == 1


def build_topology(kind: str, n: int | None = None, edges=None) -> Topology:
    """Named topology: ``grid`` (n a perfect square), ``ring`` (n >= 3),
    ``complete`` (n >= 2) or ``custom`` (explicit ``edges``)."""
    if kind == "grid":
        side = math.isqrt(n) if n is not None and n > 0 else 0
        if side * side != n:
            raise ValueError(f"grid topology needs a perfect square, got n={n}")
        out = []
        for r in range(side):
            for c in range(side):
                i = r * side + c
                if c + 1 < side:
                    out.append((i, i + 1))
                if r + 1 < side:
                    out.append((i, i + side))
        return Topology(n, frozenset(out))
    if kind == "ring":
        if n is None or n < 3:
            raise ValueError("ring topology needs n >= 3")
        return Topology(n, frozenset((i, (i + 1) % n) for i in range(n)))
    if kind == "complete":
        if n is None or n < 2:
            raise ValueError("complete topology needs n >= 2")
        return Topology(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))
    if kind == "custom":
        if edges is None:
            raise ValueError("custom topology needs an edge list")
        edges = [tuple(e) for e in edges]
        if n is None:
            n = 1 + max((max(e) for e in edges), default=0)
        return Topology(n, frozenset(edges))
    raise ValueError(f"unknown topology kind {kind!r}")


def parse_edge_list(text: str, n: int | None = None) -> Topology:
    """Parse ``i j`` lines (zero-based) with ``#`` comments."""
    edges = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected two node ids, got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return build_topology("custom", n=n, edges=edges)


def load_edge_list(path, n: int | None = None) -> Topology:
    return parse_edge_list(Path(path).read_text(), n=n)


@dataclass(frozen=True)
class MixingMatrix:
    w: np.ndarray
    lambda2: float
    lambda_min: float

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.w[i]


def spectral_quantities(w) -> tuple[float, float]:
    """Second-largest and smallest eigenvalue of a symmetric matrix.

    For a single agent there is no disagreement subspace and ``lambda2`` is 0.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("mixing matrix must be square")
    if not np.array_equal(w, w.T):
        raise ValueError("mixing matrix must be symmetric")
    eigs = np.linalg.eigvalsh(w)
    lambda2 = float(eigs[-2]) if len(eigs) > 1 else 0.0
    return lambda2, float(eigs[0])


def validate_mixing(w, topology: Topology | None = None, atol: float = 1e-12) -> None:
    """Raise ``ValueError`` unless ``w`` is symmetric, stochastic, nonnegative
    and supported on ``topology``."""
    w = np.asarray(w, dtype=float)
    if not np.array_equal(w, w.T):
        raise ValueError("mixing matrix is not symmetric")
    if np.any(w < 0):
        raise ValueError("mixing matrix has negative entries")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > atol:
        raise ValueError("mixing matrix rows do not sum to 1")
    if topology is not None:
        for i in range(w.shape[0]):
            allowed = set(topology.neighbors(i)) | {i}
            for j in np.flatnonzero(w[i]):
                if j not in allowed:
                    raise ValueError(f"weight on non-edge ({i}, {j})")


def mixing_from_matrix(w, topology: Topology | None = None) -> MixingMatrix:
    w = np.array(w, dtype=float)
    validate_mixing(w, topology)
    lambda2, lambda_min = spectral_quantities(w)
    return MixingMatrix(w, lambda2, lambda_min)


def metropolis_weights(topology: Topology) -> MixingMatrix:
    """Metropolis-Hastings weights ``1 / (1 + max(deg_i, deg_j))`` on every edge."""
    n = topology.n
    w = np.zeros((n, n))
    for i, j in topology.edges:
        w[i, j] = w[j, i] = 1.0 / (1 + max(topology.degree(i), topology.degree(j)))
    for i in range(n):
        w[i, i] = 1.0 - sum(w[i, j] for j in topology.neighbors(i))
    return mixing_from_matrix(w, topology)


def double_step_transform(mixing: MixingMatrix, alpha: float, beta: float) -> MixingMatrix:
    """Reweighted matrix ``(1 - beta/alpha) I + (beta/alpha) W``.

    Requires ``0 < beta <= alpha``; a larger ratio could push diagonal entries
    below zero.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("step sizes must be positive")
    if beta > alpha:
        raise ValueError(f"beta={beta} exceeds alpha={alpha}: the reweighted diagonal "
                         "(1 - beta/alpha) + (beta/alpha) w_ii could turn negative")
    ratio = beta / alpha
    w = ratio * mixing.w
    np.fill_diagonal(w, (1 - ratio) + ratio * np.diag(mixing.w))
    lambda2, lambda_min = spectral_quantities(w)
    return MixingMatrix(w, lambda2, lambda_min)
