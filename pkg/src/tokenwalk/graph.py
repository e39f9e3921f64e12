"""Communication graphs, random walks on them, and the augmented consensus graph."""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import DataError, GraphError, MixingError, ParameterError

WALK_KINDS = ("uniform_neighbor", "lazy", "uniform_jump")


@dataclass(frozen=True)
class CommGraph:
    """Undirected simple connected graph on nodes ``0..n-1``."""

    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n < 1:
            raise GraphError("a graph needs at least one node")
        norm = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise GraphError(f"self-loop at node {a}")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise GraphError(f"edge ({a}, {b}) references a node outside [0, {self.n})")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))
        if not _connected(self.n, norm):
            raise GraphError("graph is not connected")

    def neighbors(self, i: int) -> list[int]:
        return sorted([b for a, b in self.edges if a == i] + [a for a, b in self.edges if b == i])

    def degrees(self) -> NDArray[np.int64]:
        deg = np.zeros(self.n, dtype=np.int64)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def adjacency(self) -> NDArray[np.float64]:
        adj = np.zeros((self.n, self.n))
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = 1.0
        return adj

    @property
    def is_complete(self) -> bool:
        return len(self.edges) == self.n * (self.n - 1) // 2

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges


def _connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == n


def complete_graph(n: int) -> CommGraph:
    if n < 2:
        raise GraphError("complete graph needs n >= 2")
    return CommGraph(n, frozenset((a, b) for a in range(n) for b in range(a + 1, n)))


def ring_graph(n: int) -> CommGraph:
    if n < 3:
        raise GraphError("ring needs n >= 3")
    return CommGraph(n, frozenset((i, (i + 1) % n) for i in range(n)))


def from_edge_list(n: int, pairs: Iterable[tuple[int, int]]) -> CommGraph:
    pairs = list(pairs)
    if n < 2:
        raise GraphError("graph needs n >= 2")
    seen = set()
    for a, b in pairs:
        key = (min(a, b), max(a, b))
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)
    return CommGraph(n, frozenset(seen))


def read_edge_list(path: str | Path, n: int | None = None) -> CommGraph:
    """Read ``u v`` pairs (0-based), one per line; ``#`` starts a comment."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError("expected two node ids", lineno)
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f"non-integer node id in {line!r}", lineno) from None
    if not pairs:
        raise DataError("edge list is empty")
    if n is None:
        n = 1 + max(max(p) for p in pairs)
    return from_edge_list(n, pairs)


# ---------------------------------------------------------------------------
# random walks


@dataclass(frozen=True)
class RandomWalk:
    """Reversible Markov chain on a communication graph.

    ``gamma`` is one minus the second-largest eigenvalue modulus and
    ``mixing_const`` is ``sqrt(max pi / min pi)``.
    """

    transition: np.ndarray
    stationary: np.ndarray
    gamma: float
    mixing_const: float
    kind: str
    eigenvalues: np.ndarray

    @property
    def n(self) -> int:
        return self.transition.shape[0]

    @property
    def periodic(self) -> bool:
        return self.gamma == 0.0


def random_walk(g: CommGraph, kind: str = "uniform_neighbor", beta: float = 0.5) -> RandomWalk:
    """Build a walk on ``g``.

    ``uniform_neighbor`` moves to a uniformly chosen neighbour, ``lazy``
    stays put with probability ``beta`` and otherwise moves like
    ``uniform_neighbor``.  ``uniform_jump`` (complete graphs only) picks the
    next node uniformly among all nodes.
    """
    if kind not in WALK_KINDS:
        raise ParameterError(f"unknown walk kind {kind!r}")
    n = g.n
    deg = g.degrees().astype(float)
    if kind == "uniform_jump":
        if not g.is_complete:
            raise GraphError("uniform jumps require a complete graph")
        W = np.full((n, n), 1.0 / n)
        pi = np.full(n, 1.0 / n)
    else:
        W = g.adjacency() / deg[:, None]
        if kind == "lazy":
            if not 0.0 < beta < 1.0:
                raise ParameterError("lazy walk needs beta in (0, 1)")
            W = beta * np.eye(n) + (1.0 - beta) * W
        pi = deg / deg.sum()
    # D^{1/2} W D^{-1/2} is symmetric for a chain reversible w.r.t. pi
    sq = np.sqrt(pi)
    S = sq[:, None] * W / sq[None, :]
    eig = np.linalg.eigvalsh(0.5 * (S + S.T))
    eig = eig[np.argsort(-np.abs(eig))]
    top = np.argmin(np.abs(eig - 1.0))
    rest = np.delete(eig, top)
    slem = float(np.max(np.abs(rest))) if rest.size else 0.0
    gamma = 1.0 - slem
    if gamma <= 1e-12:
        warnings.warn("random walk is periodic or reducible; use a lazy walk", RuntimeWarning,
                      stacklevel=2)
        gamma = 0.0
    gamma = min(gamma, 1.0)
    C = math.sqrt(float(pi.max() / pi.min()))
    _check_chain(W, pi)
    W.setflags(write=False)
    pi.setflags(write=False)
    return RandomWalk(W, pi, gamma, C, kind, np.sort(eig)[::-1])


def _check_chain(W: np.ndarray, pi: np.ndarray) -> None:
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > 1e-12:
        raise GraphError("transition matrix is not row-stochastic")
    if np.max(np.abs(pi @ W - pi)) > 1e-10:
        raise GraphError("stationary distribution check failed")


def jumps_needed(rw: RandomWalk, eta: float, mu_rel: float, c_mult: float = 1.0) -> int:
    """Number of walk steps before an averaging step.

    ``ceil(c_mult / gamma * log(4 C / (eta * mu_rel)))``, at least 1.
    """
    if rw.gamma <= 0.0:
        raise MixingError("walk has zero spectral gap")
    if not (eta > 0 and mu_rel > 0 and c_mult > 0):
        raise ParameterError("eta, mu_rel and c_mult must be positive")
    val = c_mult / rw.gamma * math.log(4.0 * rw.mixing_const / (eta * mu_rel))
    return max(1, math.ceil(val))


def mixing_deviation(rw: RandomWalk, steps: int) -> float:
    """``max_i ||W^t e_i - pi||_inf`` by dense matrix powering."""
    P = np.linalg.matrix_power(rw.transition, steps)
    return float(np.max(np.abs(P - rw.stationary[None, :])))


# ---------------------------------------------------------------------------
# conceptual graph


@dataclass(frozen=True)
class ConceptualGraph:
    """Augmented graph whose consensus constraints define the dual problem.

    Node order: communication nodes ``0..n-1``, tokens ``n..n+K-1``, then
    computation nodes ``n+K + i*m + j``.  Edge order: computation edges
    ``i*m + j`` (oriented computation -> communication), then communication
    edges ``n*m + i*K + k`` (oriented node -> token).  The incidence matrix
    is stored at scalar granularity; each entry stands for a ``d x d``
    identity block.
    """

    n: int
    m: int
    K: int
    alpha: float
    sigma_tilde: float
    incidence: np.ndarray
    edge_weights: np.ndarray
    edge_ends: np.ndarray
    node_strengths: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.n * (self.m + 1) + self.K

    @property
    def num_edges(self) -> int:
        return self.n * (self.K + self.m)

    def comp_edge(self, i: int, j: int) -> int:
        return i * self.m + j

    def comm_edge(self, i: int, k: int) -> int:
        return self.n * self.m + i * self.K + k

    def comp_node(self, i: int, j: int) -> int:
        return self.n + self.K + i * self.m + j

    def token_node(self, k: int) -> int:
        return self.n + k

    def comm_block(self) -> np.ndarray:
        """Incidence restricted to communication edges and node/token rows."""
        cols = slice(self.n * self.m, self.num_edges)
        return self.incidence[: self.n + self.K, cols]

    def comm_gram_lambda_min(self, tol: float = 1e-9) -> float:
        """Smallest positive eigenvalue of ``A_comm^T A_comm``."""
        return smallest_positive_eigenvalue(self.comm_block().T @ self.comm_block(), tol)


def smallest_positive_eigenvalue(M: ArrayLike, tol: float = 1e-9) -> float:
    ev = np.linalg.eigvalsh(np.asarray(M, dtype=float))
    scale = max(1.0, float(np.max(np.abs(ev))))
    pos = ev[ev > tol * scale]
    if pos.size == 0:
        raise ParameterError("matrix has no positive eigenvalue")
    return float(pos.min())


def build_conceptual(n: int, m: int, K: int, alpha: float, smoothness: ArrayLike,
                     sigma_tilde: float) -> ConceptualGraph:
    """Incidence matrix of the augmented graph.

    ``smoothness`` is the ``(n, m)`` array of per-sample constants (or a
    :class:`~tokenwalk.objective.SmoothnessProfile`).  Computation edges
    carry weight ``sqrt(alpha * L_ij)``, communication edges weight 1.
    """
    if not 1 <= K <= n:
        raise ParameterError(f"need 1 <= K <= n, got K={K}, n={n}")
    if not alpha > 0 or not sigma_tilde > 0:
        raise ParameterError("alpha and sigma_tilde must be positive")
    L = np.asarray(getattr(smoothness, "per_sample", smoothness), dtype=float)
    if L.shape != (n, m):
        raise ParameterError(f"smoothness must have shape ({n}, {m})")
    num_nodes = n * (m + 1) + K
    num_edges = n * (K + m)
    A = np.zeros((num_nodes, num_edges))
    weights = np.empty(num_edges)
    ends = np.empty((num_edges, 2), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            e = i * m + j
            u = n + K + i * m + j
            weights[e] = math.sqrt(alpha * L[i, j])
            ends[e] = (u, i)
        for k in range(K):
            e = n * m + i * K + k
            weights[e] = 1.0
            ends[e] = (i, n + k)
    cols = np.arange(num_edges)
    A[ends[:, 0], cols] = weights
    A[ends[:, 1], cols] = -weights
    strengths = np.full(num_nodes, np.nan)
    strengths[: n + K] = sigma_tilde
    for arr in (A, weights, ends, strengths):
        arr.setflags(write=False)
    return ConceptualGraph(n, m, K, float(alpha), float(sigma_tilde), A, weights, ends, strengths)
