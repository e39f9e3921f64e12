"""Reference algorithms: gossip gradient descent, EXTRA, and gradient Walkman.

Every local function is ``f_i(theta) + sigma/2 ||theta||^2``.  Costs follow
a round model: a round costs ``m`` single-sample gradients per node and the
per-round communication count and latency of its averaging protocol.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ParameterError
from .graph import CommGraph, RandomWalk, random_walk
from .metrics import Trace, TraceRecord, stop_error
from .objective import Problem, ReferenceSolution, smoothness_profile

BASELINE_KINDS = ("gd_all_to_all", "gd_ring", "extra", "walkman_grad")


@dataclass(frozen=True)
class BaselineConfig:
    """Step size and per-round communication/latency costs.

    ``time_cost_per_round`` counts sequential communication latencies.
    """

    kind: str
    step_size: float
    comm_cost_per_round: int
    time_cost_per_round: int

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ParameterError(f"unknown baseline {self.kind!r}")
        if not self.step_size > 0:
            raise ParameterError("step size must be positive")


def make_config(kind: str, problem: Problem, graph: CommGraph | None = None,
                step_size: float | None = None) -> BaselineConfig:
    """Default costs and step sizes.

    GD variants use ``1 / (L + n sigma)``; EXTRA uses ``1 / (2 (L + sigma))``
    and costs one message per edge; Walkman uses the gradient step ``1/L``
    with ``L`` the worst local smoothness including the regulariser.
    """
    n = problem.n
    L = smoothness_profile(problem).global_L
    if kind == "gd_all_to_all":
        return BaselineConfig(kind, step_size or 1.0 / (L + n * problem.sigma), n * (n - 1), 1)
    if kind == "gd_ring":
        return BaselineConfig(kind, step_size or 1.0 / (L + n * problem.sigma), 2 * n, 2 * n)
    if kind == "extra":
        if graph is None:
            raise ConfigError("EXTRA needs a communication graph")
        return BaselineConfig(kind, step_size or 1.0 / (2.0 * (L + problem.sigma)),
                              len(graph.edges), 1)
    if kind == "walkman_grad":
        return BaselineConfig(kind, step_size or 1.0 / (L + problem.sigma), 1, 1)
    raise ParameterError(f"unknown baseline {kind!r}")


def _local_grads(problem: Problem, states: np.ndarray) -> np.ndarray:
    return problem.node_gradients(states) + problem.sigma * states


def gd_round(states: np.ndarray, problem: Problem, config: BaselineConfig) -> np.ndarray:
    """Average of the local gradient steps, broadcast to every node."""
    local = states - config.step_size * _local_grads(problem, states)
    return np.broadcast_to(local.mean(axis=0), states.shape).copy()


def metropolis_weights(graph: CommGraph) -> np.ndarray:
    deg = graph.degrees()
    W = np.zeros((graph.n, graph.n))
    for a, b in graph.edges:
        W[a, b] = W[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
    W[np.diag_indices(graph.n)] = 1.0 - W.sum(axis=1)
    return W


def check_doubly_stochastic(W: np.ndarray, tol: float = 1e-12) -> None:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ParameterError("mixing matrix must be square")
    if (np.max(np.abs(W.sum(0) - 1)) > tol or np.max(np.abs(W.sum(1) - 1)) > tol
            or np.min(W) < -tol):
        raise ParameterError("mixing matrix must be doubly stochastic and nonnegative")


class ExtraState:
    """Two consecutive iterates and the gradient at the older one."""

    def __init__(self, problem: Problem, W: np.ndarray, step: float, x0: np.ndarray | None = None):
        check_doubly_stochastic(W)
        self.problem = problem
        self.W = np.asarray(W, dtype=float)
        self.W_half = 0.5 * (np.eye(len(W)) + self.W)
        self.step = step
        self.prev: np.ndarray | None = None
        self.prev_grad: np.ndarray | None = None
        self.x = np.zeros((problem.n, problem.dim)) if x0 is None else np.array(x0, dtype=float)
        self.k = 0


def extra_step(state: ExtraState) -> ExtraState:
    """One EXTRA iteration.

    ``x1 = W x0 - a g(x0)`` and ``x_{k+2} = (I + W) x_{k+1} - W~ x_k - a (g(x_{k+1}) - g(x_k))``
    with ``W~ = (I + W) / 2``.
    """
    g = _local_grads(state.problem, state.x)
    if state.prev is None:
        new = state.W @ state.x - state.step * g
    else:
        new = (state.x + state.W @ state.x - state.W_half @ state.prev
               - state.step * (g - state.prev_grad))
    state.prev, state.prev_grad, state.x = state.x, g, new
    state.k += 1
    return state


class WalkmanState:
    """Local primal/dual pairs, the token's consensus variable and its position."""

    def __init__(self, problem: Problem, walk: RandomWalk, penalty: float, seed: int = 0,
                 start: int | None = None):
        n, d = problem.n, problem.dim
        self.problem = problem
        self.walk = walk
        self.penalty = penalty
        self.x = np.zeros((n, d))
        self.y = np.zeros((n, d))
        self.z = np.zeros(d)
        self.rng = np.random.default_rng(seed)
        self.position = int(self.rng.integers(n)) if start is None else start
        self._cdf = np.cumsum(walk.transition, axis=1)
        self.k = 0


def walkman_grad_step(state: WalkmanState) -> WalkmanState:
    """Gradient Walkman at the token's node, then one walk step.

    ``x_i = z - (y_i + grad f_i(x_i)) / beta``, ``y_i += beta (x_i - z)``,
    ``z += (delta of x_i + y_i / beta) / n``.
    """
    i = state.position
    p = state.problem
    beta = state.penalty
    xi_old = state.x[i]
    yi_old = state.y[i]
    g = p.node_gradient(i, xi_old) + p.sigma * xi_old
    xi = state.z - (yi_old + g) / beta
    yi = yi_old + beta * (xi - state.z)
    state.z = state.z + ((xi + yi / beta) - (xi_old + yi_old / beta)) / p.n
    state.x[i] = xi
    state.y[i] = yi
    u = state.rng.random()
    state.position = int(min(np.searchsorted(state._cdf[i], u, side="right"), p.n - 1))
    state.k += 1
    return state


def run_baseline(kind: str, problem: Problem, reference: ReferenceSolution,
                 graph: CommGraph | None = None, eps: float | None = None,
                 max_rounds: int = 1_000_000, check_every: int = 1, step_size: float | None = None,
                 seed: int = 0, metric: str = "both", tau_comm: float = 1000.0,
                 tau_comp: float = 1.0, divergence_factor: float = 1e6) -> Trace:
    """Run a baseline and return its trace.

    GD rounds and EXTRA iterations cost ``m tau_comp`` plus their latency
    in units of ``tau_comm``; a Walkman iteration costs
    ``tau_comm + m tau_comp`` (no parallelism).  Runs whose error exceeds
    ``divergence_factor`` times the initial error are flagged divergent.
    """
    cfg = make_config(kind, problem, graph, step_size)
    n, m, d = problem.n, problem.m, problem.dim
    ts = reference.theta_star
    trace = Trace(kind, meta={"step_size": cfg.step_size})
    comm = 0
    grads = 0.0
    time = 0.0
    round_time = m * tau_comp + cfg.time_cost_per_round * tau_comm
    states = np.zeros((n, d))
    extra = walk = None
    if kind == "extra":
        extra = ExtraState(problem, metropolis_weights(graph), cfg.step_size)
    elif kind == "walkman_grad":
        g = graph
        if g is None:
            raise ConfigError("Walkman needs a communication graph")
        with warnings.catch_warnings():
            # Walkman does not need an aperiodic walk
            warnings.simplefilter("ignore", RuntimeWarning)
            rw = random_walk(g, "uniform_neighbor")
        walk = WalkmanState(problem, rw, 1.0 / cfg.step_size, seed)

    def errors() -> tuple[float, float]:
        if walk is not None:
            en = float(np.mean(np.sum((walk.x - ts) ** 2, axis=1)))
            return en, float(np.sum((walk.z - ts) ** 2))
        cur = extra.x if extra is not None else states
        return float(np.mean(np.sum((cur - ts) ** 2, axis=1))), float("nan")

    def checkpoint(t: int) -> bool:
        en, et = errors()
        trace.append(TraceRecord(t, en, et, comm, float(comm), grads, time))
        return eps is not None and stop_error(en, et, metric) <= eps

    if checkpoint(0):
        trace.reached = True
        return trace
    err0 = max(stop_error(*errors(), metric), 1e-300)
    for r in range(1, max_rounds + 1):
        if kind in ("gd_all_to_all", "gd_ring"):
            states = gd_round(states, problem, cfg)
            comm += cfg.comm_cost_per_round
            grads += m
            time += round_time
        elif extra is not None:
            extra_step(extra)
            comm += cfg.comm_cost_per_round
            grads += m
            time += round_time
        else:
            walkman_grad_step(walk)
            comm += 1
            grads += m / n
            time += tau_comm + m * tau_comp
        if r % check_every == 0 or r == max_rounds:
            if checkpoint(r):
                trace.reached = True
                return trace
            cur = stop_error(*errors(), metric)
            if not math.isfinite(cur) or cur > divergence_factor * err0:
                trace.diverged = True
                trace.truncated = eps is not None
                return trace
    trace.truncated = eps is not None
    return trace
