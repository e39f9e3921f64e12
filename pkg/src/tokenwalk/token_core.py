"""Token gradient descent (TGD) and token variance reduction (TVR).

Nodes hold a parameter ``theta_i`` and virtual points ``z_ij``; ``K``
tokens carry their own parameters.  A communication event averages a
token with a node; a computation event moves a virtual point towards the
node parameter and corrects the node parameter by the gradient change.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .clock import ClockState
from .exceptions import NumericalError, ParameterError
from .metrics import Trace, TraceRecord, stop_error
from .objective import LOGISTIC, Problem, ReferenceSolution, loss_derivative, smoothness_profile

TGD = "tgd"
TVR = "tvr"
VARIANTS = (TGD, TVR)

EVENT_BLOCK = 4096
DUAL_CHECK_EVERY = 64


@dataclass(frozen=True)
class AlgoParams:
    """Scalars that drive one run of TGD or TVR.

    ``L`` is the worst node smoothness ``max_i sum_j L_ij`` and
    ``kappa_s = 1 + L / sigma_tilde``.
    """

    variant: str
    n: int
    m: int
    K: int
    sigma: float
    sigma_tilde: float
    alpha: float
    eta: float
    rho_comm: float
    rho_comp: float
    p_comm: float
    p_comp: float
    L: float
    kappa_s: float

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not 1 <= self.K <= self.n:
            raise ParameterError(f"need 1 <= K <= n, got K={self.K}, n={self.n}")
        if not (0.0 < self.p_comm < 1.0 and 0.0 < self.p_comp < 1.0):
            raise ParameterError("p_comm and p_comp must lie in (0, 1)")
        if abs(self.p_comm + self.p_comp - 1.0) > 1e-12:
            raise ParameterError("p_comm + p_comp must equal 1")
        expect_comm = self.n * self.K * self.eta / (self.p_comm * self.sigma_tilde)
        units = self.m if self.variant == TVR else 1
        expect_comp = units * self.n * self.alpha * self.eta / self.p_comp
        if not (math.isclose(self.rho_comm, expect_comm, rel_tol=1e-12)
                and math.isclose(self.rho_comp, expect_comp, rel_tol=1e-12)):
            raise ParameterError("step sizes are inconsistent with eta")
        if not (0.0 < self.rho_comm <= 1.0 + 1e-12 and 0.0 < self.rho_comp <= 1.0 + 1e-12):
            raise ParameterError("step sizes must lie in (0, 1]")

    @property
    def samples_per_node(self) -> int:
        """Number of virtual points per node (``m`` for TVR, 1 for TGD)."""
        return self.m if self.variant == TVR else 1

    @property
    def grads_per_comp(self) -> int:
        """Single-sample gradients charged to one computation event."""
        return 1 if self.variant == TVR else self.m

    def with_eta(self, eta: float) -> "AlgoParams":
        """Same parameters with a different ``eta`` and matching step sizes."""
        units = self.m if self.variant == TVR else 1
        return replace(self, eta=eta,
                       rho_comm=self.n * self.K * eta / (self.p_comm * self.sigma_tilde),
                       rho_comp=units * self.n * self.alpha * eta / self.p_comp)


def _sigma_tilde(problem: Problem, K: int) -> float:
    if not 1 <= K <= problem.n:
        raise ParameterError(f"need 1 <= K <= n, got K={K}, n={problem.n}")
    return problem.n * problem.sigma / (problem.n + K)


def params_tgd(problem: Problem, K: int = 1, p_comm: float = 0.5) -> AlgoParams:
    """Token gradient descent parameters; ``alpha = 2K / L``."""
    st = _sigma_tilde(problem, K)
    if not 0.0 < p_comm < 1.0:
        raise ParameterError("p_comm must lie in (0, 1)")
    n = problem.n
    L = smoothness_profile(problem).global_L
    p_comp = 1.0 - p_comm
    alpha = 2.0 * K / L
    eta = min(st * p_comm / (2 * n * K), p_comp / (n * alpha * (1.0 + L / st)))
    return AlgoParams(TGD, n, problem.m, K, problem.sigma, st, alpha, eta,
                      n * K * eta / (p_comm * st), n * alpha * eta / p_comp,
                      p_comm, p_comp, L, 1.0 + L / st)


def tvr_alpha(K: int, sigma_tilde: float, kappa_s: float) -> float:
    """Computation-edge scale ``2K / (sigma_tilde kappa_s)``, i.e. ``2K / (sigma_tilde + L)``.

    With this scale the two branches of the step-size minimum coincide at
    the balanced ``p_comp``.
    """
    return 2.0 * K / (sigma_tilde * kappa_s)


def params_tvr(problem: Problem, K: int = 1, p_comm: float | None = None,
               alpha: float | None = None) -> AlgoParams:
    """Token variance reduction parameters.

    ``p_comp = (1 + kappa_s / (m - 1 + kappa_s))^-1`` unless ``p_comm`` is
    given; ``alpha`` defaults to :func:`tvr_alpha`.
    """
    st = _sigma_tilde(problem, K)
    n, m = problem.n, problem.m
    L = smoothness_profile(problem).global_L
    ks = 1.0 + L / st
    if p_comm is None:
        p_comp = 1.0 / (1.0 + ks / (m - 1 + ks))
        p_comm = 1.0 - p_comp
    else:
        if not 0.0 < p_comm < 1.0:
            raise ParameterError("p_comm must lie in (0, 1)")
        p_comp = 1.0 - p_comm
    a = tvr_alpha(K, st, ks) if alpha is None else float(alpha)
    eta = min(st * p_comm / (2 * n * K), p_comp / (a * n * (m - 1 + ks)))
    return AlgoParams(TVR, n, m, K, problem.sigma, st, a, eta,
                      n * K * eta / (p_comm * st), m * n * a * eta / p_comp,
                      p_comm, p_comp, L, ks)


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class NodeState:
    theta: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class TokenState:
    theta: np.ndarray
    position: int
    id: int


class RunState:
    """Mutable state of a TGD/TVR run.

    Arrays: ``theta`` (n, d), ``z`` (n, v, d) with ``v`` virtual points per
    node, ``tokens`` (K, d), ``positions`` (K,).  ``zgrad`` caches the
    gradient of each virtual point's function at ``z``.
    """

    def __init__(self, problem: Problem, params: AlgoParams, theta, z, tokens, positions,
                 event_rng: np.random.Generator, walk_rng: np.random.Generator):
        self.problem = problem
        self.params = params
        self.theta = theta
        self.z = z
        self.tokens = tokens
        self.positions = positions
        self.event_rng = event_rng
        self.walk_rng = walk_rng
        self.comm_counts = np.zeros(params.K, dtype=np.int64)
        self.grad_counts = np.zeros(problem.n, dtype=np.int64)
        self.t = 0
        self.zgrad = _gradients_at(problem, params, z)
        self.invariant0 = dual_invariant(self)

    def copy(self) -> "RunState":
        return copy.deepcopy(self)

    @property
    def nodes(self) -> tuple[NodeState, ...]:
        return tuple(NodeState(self.theta[i].copy(), self.z[i].copy())
                     for i in range(self.problem.n))

    @property
    def token_states(self) -> tuple[TokenState, ...]:
        return tuple(TokenState(self.tokens[k].copy(), int(self.positions[k]), k)
                     for k in range(self.params.K))

    def errors(self, theta_star: ArrayLike) -> tuple[float, float]:
        ts = np.asarray(theta_star)
        en = float(np.mean(np.sum((self.theta - ts) ** 2, axis=1)))
        et = float(np.mean(np.sum((self.tokens - ts) ** 2, axis=1)))
        return en, et

    def record(self, theta_star: ArrayLike, time: float = float("nan")) -> TraceRecord:
        en, et = self.errors(theta_star)
        total = int(self.comm_counts.sum())
        return TraceRecord(self.t, en, et, total, total / self.params.K,
                           float(self.grad_counts.mean()), time)


def _gradients_at(problem: Problem, params: AlgoParams, z: np.ndarray) -> np.ndarray:
    if params.variant == TVR:
        u = np.einsum("imd,imd->im", problem.features, z)
        s = problem.weights * loss_derivative(problem.loss_kind, u, problem.labels)
        return s[:, :, None] * problem.features
    return problem.node_gradients(z[:, 0, :])[:, None, :]


def dual_invariant(state: RunState) -> np.ndarray:
    """``sigma_tilde (sum theta_i + sum tokens) + sum of gradients at the virtual points``."""
    g = _gradients_at(state.problem, state.params, state.z)
    return state.params.sigma_tilde * (state.theta.sum(0) + state.tokens.sum(0)) + g.sum((0, 1))


def check_invariant(state: RunState, rtol: float = 1e-8) -> float:
    """Relative drift of :func:`dual_invariant`; raises when above ``rtol``."""
    cur = dual_invariant(state)
    st = state.params.sigma_tilde
    g = _gradients_at(state.problem, state.params, state.z)
    scale = (st * (np.abs(state.theta).sum() + np.abs(state.tokens).sum())
             + np.abs(g).sum() + np.abs(state.invariant0).sum() + 1e-300)
    drift = float(np.abs(cur - state.invariant0).sum() / scale)
    if drift > rtol:
        raise NumericalError("dual-feasibility invariant drifted", residual=drift)
    return drift


def spawn_rngs(seed: int) -> tuple[np.random.Generator, ...]:
    """Independent generators for events, initial positions and walk jumps."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def init_state(problem: Problem, params: AlgoParams, z0: ArrayLike | None = None,
               seed: int = 0) -> RunState:
    """Initial state: ``theta_i = -sum_j grad f_ij(z0_ij) / sigma_tilde``, tokens at 0.

    ``z0`` is a single point of length ``d`` (shared) or an array of shape
    ``(n, v, d)``.  Token positions are drawn uniformly.
    """
    if params.n != problem.n or params.m != problem.m:
        raise ParameterError("parameters were built for a different problem")
    n, d, v = problem.n, problem.dim, params.samples_per_node
    if z0 is None:
        z = np.zeros((n, v, d))
    else:
        z0 = np.asarray(z0, dtype=float)
        if z0.shape == (d,):
            z = np.broadcast_to(z0, (n, v, d)).copy()
        elif z0.shape == (n, v, d):
            z = z0.copy()
        else:
            raise ParameterError(f"z0 must have shape ({d},) or ({n}, {v}, {d})")
    event_rng, pos_rng, walk_rng = spawn_rngs(seed)
    positions = pos_rng.integers(0, n, size=params.K)
    g = _gradients_at(problem, params, z)
    theta = -g.sum(axis=1) / params.sigma_tilde
    tokens = np.zeros((params.K, d))
    return RunState(problem, params, theta, z, tokens, positions, event_rng, walk_rng)


# ---------------------------------------------------------------------------
# updates


def comm_update(state: RunState, i: int, k: int, rho: float | None = None) -> RunState:
    """Symmetric averaging of token ``k`` with node ``i`` using pre-update values."""
    r = state.params.rho_comm if rho is None else rho
    tok = state.tokens[k]
    node = state.theta[i]
    diff = r * (tok - node)
    state.tokens[k] = tok - diff
    state.theta[i] = node + diff
    state.comm_counts[k] += 1
    state.positions[k] = i
    return state


def comp_update(state: RunState, i: int, j: int = 0, rho: float | None = None) -> RunState:
    """Move virtual point ``(i, j)`` towards ``theta_i`` and correct ``theta_i``."""
    p = state.params
    if not 0 <= i < p.n:
        raise IndexError(f"node {i} out of range")
    if not 0 <= j < p.samples_per_node:
        raise IndexError(f"sample {j} out of range for {p.variant}")
    r = p.rho_comp if rho is None else rho
    z_new = (1.0 - r) * state.z[i, j] + r * state.theta[i]
    prob = state.problem
    if p.variant == TVR:
        x = prob.features[i, j]
        s = prob.weights[i, j] * float(loss_derivative(prob.loss_kind, x @ z_new,
                                                       prob.labels[i, j]))
        g_new = s * x
    else:
        g_new = prob.node_gradient(i, z_new)
    state.theta[i] -= (g_new - state.zgrad[i, j]) / p.sigma_tilde
    state.zgrad[i, j] = g_new
    state.z[i, j] = z_new
    state.grad_counts[i] += p.grads_per_comp
    return state


def draw_events(rng: np.random.Generator, p_comm: float, n: int, K: int, units: int,
                size: int) -> tuple[NDArray[np.bool_], NDArray[np.int64], NDArray[np.int64]]:
    """Draw ``size`` events, three uniforms each.

    Returns ``(is_comm, node, other)`` where ``other`` is a token index
    for communication events and a sample index for computation events.
    """
    u = rng.random((size, 3))
    is_comm = u[:, 0] < p_comm
    node = np.minimum((u[:, 1] * n).astype(np.int64), n - 1)
    other = np.where(is_comm, np.minimum((u[:, 2] * K).astype(np.int64), K - 1),
                     np.minimum((u[:, 2] * units).astype(np.int64), units - 1))
    return is_comm, node, other


def step(state: RunState) -> RunState:
    """Draw one event from the state's generator and apply it."""
    p = state.params
    is_comm, node, other = draw_events(state.event_rng, p.p_comm, p.n, p.K,
                                       p.samples_per_node, 1)
    if is_comm[0]:
        comm_update(state, int(node[0]), int(other[0]))
    else:
        comp_update(state, int(node[0]), int(other[0]))
    state.t += 1
    return state


class _Kernel:
    """Tight loop over a block of events on raw arrays."""

    def __init__(self, state: RunState):
        self.state = state
        p = state.params
        prob = state.problem
        self.tvr = p.variant == TVR
        self.logistic = prob.loss_kind == LOGISTIC
        self.X = prob.features
        self.y = prob.labels
        self.w = prob.weights
        if self.tvr:
            # cache scalar gradient factors s_ij so that zgrad = s_ij * x_ij
            u = np.einsum("imd,imd->im", prob.features, state.z)
            self.s = prob.weights * loss_derivative(prob.loss_kind, u, prob.labels)
        self.m = prob.m

    def comp(self, i: int, j: int, rho: float) -> None:
        st = self.state
        theta_i = st.theta[i]
        if self.tvr:
            zij = st.z[i, j]
            zij *= 1.0 - rho
            zij += rho * theta_i
            x = self.X[i, j]
            u = float(x @ zij)
            lab = self.y[i, j]
            if self.logistic:
                lu = lab * u
                sn = -lab / (1.0 + math.exp(lu)) if lu < 700 else 0.0
            else:
                sn = u - lab
            sn *= self.w[i, j]
            delta = sn - self.s[i, j]
            self.s[i, j] = sn
            theta_i -= (delta / st.params.sigma_tilde) * x
            st.zgrad[i, j] = sn * x
            st.grad_counts[i] += 1
        else:
            z = st.z[i, 0]
            z *= 1.0 - rho
            z += rho * theta_i
            X = self.X[i]
            u = X @ z
            lab = self.y[i]
            if self.logistic:
                sn = -lab / (1.0 + np.exp(np.minimum(lab * u, 700.0)))
            else:
                sn = u - lab
            g = (self.w[i] * sn) @ X
            theta_i -= (g - st.zgrad[i, 0]) / st.params.sigma_tilde
            st.zgrad[i, 0] = g
            st.grad_counts[i] += self.m


def run(state: RunState, reference: ReferenceSolution | None = None, eps: float | None = None,
        max_iters: int = 10_000_000, check_every: int | None = None, metric: str = "both",
        tau_comm: float = 1000.0, tau_comp: float = 1.0, label: str | None = None,
        check_dual: bool = True,
        on_checkpoint: Callable[[RunState, TraceRecord], None] | None = None
        ) -> tuple[RunState, Trace]:
    """Run until the checkpoint error is at most ``eps`` or ``max_iters`` events.

    The error is measured against ``reference`` every ``check_every``
    iterations (default ``n``).  ``metric`` selects the node error, the
    token error, or their maximum (``both``).  The trace is flagged
    truncated when ``eps`` is set but not reached.
    """
    p = state.params
    if check_every is None:
        check_every = p.n
    if check_every < 1:
        raise ParameterError("checkpoint cadence must be at least 1")
    if eps is not None and reference is None:
        raise ParameterError("an error target needs a reference solution")
    theta_star = np.zeros(state.problem.dim) if reference is None else reference.theta_star
    clock = ClockState(p.n, tau_comm, tau_comp, state.positions)
    trace = Trace(label or p.variant, meta={"K": p.K, "n": p.n, "m": p.m})
    kernel = _Kernel(state)

    checks = 0

    def checkpoint() -> bool:
        nonlocal checks
        rec = state.record(theta_star, clock.total)
        trace.append(rec)
        # the invariant needs every gradient, so only test it now and then
        if check_dual and checks % DUAL_CHECK_EVERY == 0:
            check_invariant(state)
        checks += 1
        if on_checkpoint is not None:
            on_checkpoint(state, rec)
        return eps is not None and stop_error(rec.err_node, rec.err_token, metric) <= eps

    if checkpoint():
        trace.reached = True
        return state, trace
    units = p.samples_per_node
    comp_cost = p.grads_per_comp
    rho_c, rho_p = p.rho_comm, p.rho_comp
    theta, tokens, positions, counts = state.theta, state.tokens, state.positions, state.comm_counts
    since = 0
    while state.t < max_iters:
        block = min(EVENT_BLOCK, max_iters - state.t)
        saved = state.event_rng.bit_generator.state
        is_comm, node, other = draw_events(state.event_rng, p.p_comm, p.n, p.K, units, block)
        for e in range(block):
            i = int(node[e])
            o = int(other[e])
            if is_comm[e]:
                clock.move_token(o, i)
                diff = rho_c * (tokens[o] - theta[i])
                tokens[o] -= diff
                theta[i] += diff
                counts[o] += 1
                positions[o] = i
            else:
                clock.compute(i, comp_cost)
                kernel.comp(i, o, rho_p)
            state.t += 1
            since += 1
            if since == check_every:
                since = 0
                if checkpoint():
                    trace.reached = True
                    # leave the generator exactly after the consumed events
                    state.event_rng.bit_generator.state = saved
                    state.event_rng.random((e + 1, 3))
                    return state, trace
    if since:
        trace.reached = checkpoint()
    trace.truncated = eps is not None and not trace.reached
    return state, trace

