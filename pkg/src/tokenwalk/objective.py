"""Finite-sum generalized linear objectives.

Every sample is ``f(theta) = weight * loss(x @ theta)`` with either the
squared loss ``0.5 * (u - b)**2`` or the logistic loss
``log(1 + exp(-y * u))``.  Node ``i`` holds ``m`` samples and the global
objective is ``sum_i [sum_j f_ij(theta) + sigma/2 * ||theta||^2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import ConvergenceError, DataError, DomainError, NumericalError, ParameterError

FloatArray = NDArray[np.float64]

QUADRATIC = "quadratic"
LOGISTIC = "logistic"
LOSS_KINDS = (QUADRATIC, LOGISTIC)

# Dimensions of the full-scale text-classification run the desk experiments stand in for.
RCV1_FULL_SCALE = {"d": 47236, "n": 20, "m": 9841}


def _check_kind(kind: str) -> str:
    if kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return kind


def _frozen(a: ArrayLike, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# scalar losses and their conjugates (vectorised over numpy arrays)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_value(kind: str, u, label):
    """Loss ``l(u)`` for the given label."""
    u = np.asarray(u, dtype=float)
    if kind == QUADRATIC:
        return 0.5 * (u - label) ** 2
    return np.logaddexp(0.0, -label * u)


def loss_derivative(kind: str, u, label):
    """First derivative ``l'(u)``."""
    u = np.asarray(u, dtype=float)
    if kind == QUADRATIC:
        return u - label
    return -label * _sigmoid(-label * u)


def loss_second_derivative(kind: str, u, label):
    u = np.asarray(u, dtype=float)
    if kind == QUADRATIC:
        return np.ones_like(u)
    s = _sigmoid(label * u)
    return s * (1.0 - s)


def _logistic_dual_fraction(v, label) -> np.ndarray:
    a = -np.asarray(v, dtype=float) * label
    if np.any(a < 0.0) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
        raise DomainError("logistic conjugate requires -label * v in [0, 1]")
    return a


def loss_conjugate(kind: str, v, label):
    """Fenchel conjugate ``l*(v) = sup_u v*u - l(u)``.

    For the logistic loss the domain is ``-label * v`` in ``[0, 1]``;
    arguments outside raise :class:`DomainError`.
    """
    v = np.asarray(v, dtype=float)
    if kind == QUADRATIC:
        return 0.5 * v * v + label * v
    a = _logistic_dual_fraction(v, label)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
        ent += np.where(a < 1, (1 - a) * np.log(np.where(a < 1, 1 - a, 1.0)), 0.0)
    return ent


def loss_conjugate_derivative(kind: str, v, label):
    """Derivative of the conjugate; inverse map of ``l'``.

    Requires the open domain for the logistic loss.
    """
    v = np.asarray(v, dtype=float)
    if kind == QUADRATIC:
        return v + label
    a = _logistic_dual_fraction(v, label)
    if np.any(a <= 0.0) or np.any(a >= 1.0):
        raise DomainError("logistic conjugate is not differentiable on the boundary")
    return -label * (np.log(a) - np.log1p(-a))


def solve_prox_root(kind: str, label: float, curvature: float, target: float,
                    tol: float = 1e-14, max_iter: int = 100) -> float:
    """Solve ``u + curvature * l'(u) = target`` for ``u``.

    The left side is strictly increasing, so the root is unique.  Quadratic
    losses are solved in closed form; logistic losses by Newton steps
    safeguarded with bisection on a bracket of width ``2*curvature``.
    """
    if curvature < 0:
        raise ParameterError("curvature must be nonnegative")
    if curvature == 0.0:
        return float(target)
    if kind == QUADRATIC:
        return (target + curvature * label) / (1.0 + curvature)
    lo, hi = target - curvature, target + curvature
    u = target
    resid = math.inf
    scale = 1.0 + abs(target) + curvature
    for _ in range(max_iter):
        lu = label * u
        s = 1.0 / (1.0 + math.exp(lu)) if lu < 700 else 0.0
        resid = u + curvature * (-label * s) - target
        if abs(resid) <= tol * scale:
            return u
        if resid > 0:
            hi = u
        else:
            lo = u
        deriv = 1.0 + curvature * s * (1.0 - s)
        nxt = u - resid / deriv
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if nxt == u:
            return u
        u = nxt
    raise NumericalError("prox root find did not converge", residual=abs(resid))


# ---------------------------------------------------------------------------
# samples and nodes


@dataclass(frozen=True)
class SampleFunction:
    """One term ``weight * loss(features @ theta)``."""

    features: np.ndarray
    label: float
    loss_kind: str = QUADRATIC
    weight: float = 1.0

    def __post_init__(self):
        x = _frozen(self.features)
        if x.ndim != 1 or x.size == 0:
            raise ParameterError("features must be a nonempty vector")
        if not np.all(np.isfinite(x)) or not math.isfinite(self.label):
            raise ParameterError("features and label must be finite")
        if not self.weight > 0 or not math.isfinite(self.weight):
            raise ParameterError("weight must be positive and finite")
        _check_kind(self.loss_kind)
        if self.loss_kind == LOGISTIC and self.label not in (-1.0, 1.0):
            raise ParameterError("logistic labels must be +1 or -1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", float(self.label))
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def dim(self) -> int:
        return self.features.size


def _as_point(point: ArrayLike, dim: int) -> FloatArray:
    p = np.asarray(point, dtype=float)
    if p.shape != (dim,):
        raise ParameterError(f"expected a point of shape ({dim},), got {p.shape}")
    return p


def value_sample(s: SampleFunction, point: ArrayLike) -> float:
    p = _as_point(point, s.dim)
    return float(s.weight * loss_value(s.loss_kind, s.features @ p, s.label))


def grad_sample(s: SampleFunction, point: ArrayLike) -> FloatArray:
    """Gradient ``weight * l'(x @ point) * x``."""
    p = _as_point(point, s.dim)
    return s.weight * float(loss_derivative(s.loss_kind, s.features @ p, s.label)) * s.features


def smoothness(s: SampleFunction) -> float:
    """Lipschitz constant of ``grad_sample``: ``w||x||^2`` (quadratic) or ``w||x||^2/4``."""
    sq = float(s.features @ s.features)
    return s.weight * sq * (1.0 if s.loss_kind == QUADRATIC else 0.25)


def prox_sample(s: SampleFunction, center: ArrayLike, step: float,
                tol: float = 1e-14, max_iter: int = 100) -> FloatArray:
    """``argmin_v f(v) + ||v - center||^2 / (2 step)``.

    The minimiser is ``center - step * w * l'(u) * x`` where the scalar
    ``u = x @ v`` solves a monotone one-dimensional equation.
    """
    if not step > 0:
        raise ParameterError("prox step must be positive")
    c = _as_point(center, s.dim)
    x = s.features
    sq = float(x @ x)
    if sq == 0.0:
        return c.copy()
    u = solve_prox_root(s.loss_kind, s.label, step * s.weight * sq, float(x @ c), tol, max_iter)
    return c - step * s.weight * float(loss_derivative(s.loss_kind, u, s.label)) * x


@dataclass(frozen=True)
class NodeObjective:
    """The ``m`` samples held by one node."""

    samples: tuple[SampleFunction, ...]
    node_id: int = 0

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ParameterError("a node needs at least one sample")
        dims = {s.dim for s in samples}
        kinds = {s.loss_kind for s in samples}
        if len(dims) != 1 or len(kinds) != 1:
            raise ParameterError("samples of a node must share dimension and loss kind")
        object.__setattr__(self, "samples", samples)

    @property
    def m(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Problem:
    """``n`` nodes with ``m`` samples each, stored as dense arrays.

    Attributes
    ----------
    features : array of shape (n, m, d)
    labels, weights : arrays of shape (n, m)
    loss_kind : "quadratic" or "logistic"
    sigma : regularisation added at every node
    """

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    loss_kind: str
    sigma: float
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.labels)
        w = _frozen(self.weights)
        if X.ndim != 3 or X.shape[0] < 1 or X.shape[1] < 1 or X.shape[2] < 1:
            raise ParameterError("features must have shape (n, m, d) with positive sizes")
        if y.shape != X.shape[:2] or w.shape != X.shape[:2]:
            raise ParameterError("labels and weights must have shape (n, m)")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ParameterError("features and labels must be finite")
        if not np.all(w > 0):
            raise ParameterError("weights must be positive")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ParameterError("sigma must be positive")
        _check_kind(self.loss_kind)
        if self.loss_kind == LOGISTIC and not np.all(np.abs(y) == 1.0):
            raise ParameterError("logistic labels must be +1 or -1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_nodes(cls, nodes: Sequence[NodeObjective], sigma: float,
                   metadata: Mapping[str, object] | None = None) -> "Problem":
        nodes = list(nodes)
        if not nodes:
            raise ParameterError("need at least one node")
        if len({nd.m for nd in nodes}) != 1:
            raise ParameterError("all nodes must hold the same number of samples")
        X = np.array([[s.features for s in nd.samples] for nd in nodes])
        y = np.array([[s.label for s in nd.samples] for nd in nodes])
        w = np.array([[s.weight for s in nd.samples] for nd in nodes])
        kinds = {nd.samples[0].loss_kind for nd in nodes}
        if len(kinds) != 1:
            raise ParameterError("all nodes must share the loss kind")
        return cls(X, y, w, kinds.pop(), sigma, metadata or {})

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def sample(self, i: int, j: int) -> SampleFunction:
        return SampleFunction(self.features[i, j], self.labels[i, j], self.loss_kind,
                              self.weights[i, j])

    @property
    def nodes(self) -> tuple[NodeObjective, ...]:
        return tuple(NodeObjective(tuple(self.sample(i, j) for j in range(self.m)), i)
                     for i in range(self.n))

    def with_sigma(self, sigma: float) -> "Problem":
        return Problem(self.features, self.labels, self.weights, self.loss_kind, sigma,
                       self.metadata)

    # vectorised oracles used by the solvers

    def sample_scalar_grads(self, i: int, point: FloatArray) -> FloatArray:
        """``w_ij * l'(x_ij @ point)`` for every sample of node ``i``."""
        u = self.features[i] @ point
        return self.weights[i] * loss_derivative(self.loss_kind, u, self.labels[i])

    def node_gradient(self, i: int, point: ArrayLike) -> FloatArray:
        """Gradient of ``sum_j f_ij`` at ``point`` (no regulariser)."""
        p = _as_point(point, self.dim)
        return self.sample_scalar_grads(i, p) @ self.features[i]

    def node_gradients(self, points: FloatArray) -> FloatArray:
        """Row ``i`` is the local data gradient of node ``i`` at ``points[i]``."""
        u = np.einsum("imd,id->im", self.features, points)
        s = self.weights * loss_derivative(self.loss_kind, u, self.labels)
        return np.einsum("im,imd->id", s, self.features)


def full_gradient(p: Problem, point: ArrayLike) -> FloatArray:
    """Gradient of the global objective ``sum_ij f_ij + n sigma/2 ||.||^2``."""
    x = _as_point(point, p.dim)
    X = p.features.reshape(-1, p.dim)
    s = p.weights.ravel() * loss_derivative(p.loss_kind, X @ x, p.labels.ravel())
    return X.T @ s + p.n * p.sigma * x


def objective_value(p: Problem, point: ArrayLike) -> float:
    x = _as_point(point, p.dim)
    X = p.features.reshape(-1, p.dim)
    vals = p.weights.ravel() * loss_value(p.loss_kind, X @ x, p.labels.ravel())
    return float(vals.sum() + 0.5 * p.n * p.sigma * (x @ x))


# ---------------------------------------------------------------------------
# smoothness bookkeeping


@dataclass(frozen=True)
class SmoothnessProfile:
    """Per-sample smoothness constants and derived condition numbers."""

    per_sample: np.ndarray
    sigma: float

    def __post_init__(self):
        L = _frozen(self.per_sample)
        if L.ndim != 2 or np.any(L < 0):
            raise ParameterError("per-sample smoothness must be a nonnegative (n, m) array")
        object.__setattr__(self, "per_sample", L)

    @property
    def per_node(self) -> FloatArray:
        return self.per_sample.sum(axis=1)

    @property
    def global_L(self) -> float:
        return float(self.per_node.max())

    @property
    def kappa(self) -> float:
        """Batch condition number ``1 + L / sigma``."""
        return 1.0 + self.global_L / self.sigma

    def kappa_s(self, sigma_tilde: float) -> float:
        """Stochastic condition number ``max_i 1 + sum_j L_ij / sigma_tilde``."""
        if not sigma_tilde > 0:
            raise ParameterError("sigma_tilde must be positive")
        return 1.0 + self.global_L / sigma_tilde

    @property
    def batch_L(self) -> float:
        """Heuristic batch smoothness ``0.02 * max_ij L_ij``."""
        return 0.02 * float(self.per_sample.max())


def smoothness_profile(p: Problem) -> SmoothnessProfile:
    sq = np.einsum("imd,imd->im", p.features, p.features)
    scale = 1.0 if p.loss_kind == QUADRATIC else 0.25
    return SmoothnessProfile(p.weights * sq * scale, p.sigma)


# ---------------------------------------------------------------------------
# reference solution


@dataclass(frozen=True)
class ReferenceSolution:
    theta_star: np.ndarray
    grad_norm: float
    tolerance: float
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta_star", _frozen(self.theta_star))
        if not self.grad_norm <= self.tolerance:
            raise ParameterError("reference gradient norm exceeds its tolerance")


def solve_reference(p: Problem, tolerance: float = 1e-10, start: ArrayLike | None = None,
                    max_iter: int = 5_000_000) -> ReferenceSolution:
    """Plain gradient descent on the global objective until ``||grad|| <= tolerance``.

    The step is ``1 / (n sigma + sum_ij L_ij)``, a global smoothness bound.
    """
    if not tolerance > 0:
        raise ParameterError("tolerance must be positive")
    X = p.features.reshape(-1, p.dim)
    y = p.labels.ravel()
    w = p.weights.ravel()
    reg = p.n * p.sigma
    step = 1.0 / (reg + float(smoothness_profile(p).per_sample.sum()))
    x = np.zeros(p.dim) if start is None else _as_point(start, p.dim).copy()
    for it in range(max_iter + 1):
        g = X.T @ (w * loss_derivative(p.loss_kind, X @ x, y)) + reg * x
        gn = float(np.linalg.norm(g))
        if gn <= tolerance:
            return ReferenceSolution(x, gn, tolerance, it)
        x = x - step * g
    raise ConvergenceError(f"reference solver stopped at gradient norm {gn:.3e} "
                           f"after {max_iter} iterations")


# ---------------------------------------------------------------------------
# data sources


def load_libsvm(path: str | Path, dim_hint: int | None = None) -> tuple[FloatArray, FloatArray]:
    """Parse ``label idx:val ...`` lines (1-based indices) into dense arrays.

    Blank lines and ``#`` comments are skipped.  Returns ``(features, labels)``.
    """
    rows: list[dict[int, float]] = []
    labels: list[float] = []
    max_idx = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError:
                raise DataError(f"bad label {parts[0]!r}", lineno) from None
            entries: dict[int, float] = {}
            for tok in parts[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataError(f"bad feature token {tok!r}", lineno) from None
                if idx < 1:
                    raise DataError(f"feature index {idx} is not 1-based", lineno)
                if dim_hint is not None and idx > dim_hint:
                    raise DataError(f"feature index {idx} exceeds dimension {dim_hint}", lineno)
                entries[idx - 1] = val
                max_idx = max(max_idx, idx)
            rows.append(entries)
            labels.append(label)
    d = dim_hint if dim_hint is not None else max_idx
    if d < 1:
        raise DataError("no features found")
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for c, v in entries.items():
            X[r, c] = v
    return X, np.asarray(labels, dtype=float)


def problem_from_samples(features: ArrayLike, labels: ArrayLike, n: int, m: int | None = None,
                         loss_kind: str = LOGISTIC, sigma: float = 1e-5,
                         weight: float | None = None,
                         metadata: Mapping[str, object] | None = None) -> Problem:
    """Split samples contiguously into ``n`` nodes of ``m`` samples each.

    Samples past ``n*m`` are discarded.  ``weight`` defaults to ``1/m``.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if n < 1:
        raise ParameterError("n must be positive")
    total = X.shape[0]
    if total < n:
        raise DataError(f"{total} samples cannot fill {n} nodes")
    m = total // n if m is None else m
    if m < 1 or n * m > total:
        raise DataError(f"{total} samples cannot fill {n} nodes of {m} samples")
    if loss_kind == LOGISTIC:
        y = np.where(y > 0, 1.0, -1.0)
    w = 1.0 / m if weight is None else weight
    meta = {"source_samples": total, "discarded": total - n * m}
    meta.update(metadata or {})
    return Problem(X[: n * m].reshape(n, m, -1), y[: n * m].reshape(n, m),
                   np.full((n, m), w), loss_kind, sigma, meta)


def make_synthetic(n: int, m: int, d: int, loss_kind: str = LOGISTIC, seed: int = 0,
                   sigma: float = 1e-2, noise: float = 0.1, correlation: float = 0.0,
                   weight: float | None = None) -> Problem:
    """Random GLM instance, deterministic per seed.

    Features are standard normal scaled by ``1/sqrt(d)``.  With
    ``correlation`` in ``[0, 1)`` every feature vector is pulled towards a
    shared random direction, which makes sample Hessians overlap.
    """
    _check_kind(loss_kind)
    if min(n, m, d) < 1:
        raise ParameterError("n, m and d must be positive")
    if not 0.0 <= correlation < 1.0:
        raise ParameterError("correlation must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m, d))
    if correlation > 0.0:
        shared = rng.standard_normal(d)
        coef = rng.standard_normal((n, m, 1))
        X = math.sqrt(1.0 - correlation) * X + math.sqrt(correlation) * coef * shared
    X /= math.sqrt(d)
    truth = rng.standard_normal(d)
    score = X @ truth
    if loss_kind == LOGISTIC:
        y = np.where(score + noise * rng.standard_normal((n, m)) >= 0, 1.0, -1.0)
    else:
        y = score + noise * rng.standard_normal((n, m))
    w = 1.0 / m if weight is None else weight
    meta = {"synthetic_seed": seed, "correlation": correlation}
    return Problem(X, y, np.full((n, m), w), loss_kind, sigma, meta)


def sigma_for_kappa_s(p: Problem, K: int, kappa_s: float) -> float:
    """Regularisation ``sigma`` for which the stochastic condition number equals ``kappa_s``."""
    if not kappa_s > 1:
        raise ParameterError("kappa_s must exceed 1")
    L = smoothness_profile(p).global_L
    sigma_tilde = L / (kappa_s - 1.0)
    return sigma_tilde * (p.n + K) / p.n
