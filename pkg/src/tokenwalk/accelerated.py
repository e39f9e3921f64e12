"""Accelerated token variance reduction (TAVR).

Accelerated coordinate descent on the dual of the consensus problem.
Three dual sequences are kept: ``y`` (the iterate whose primal image is
reported), ``z`` (the momentum sequence) and their mixture ``x``.  Each
iteration samples one dual coordinate, either a (node, token) edge or a
(node, sample) edge, and performs

* ``x = tau * z + (1 - tau) * y``
* ``y' = x`` plus an exact coordinate minimisation along the sampled edge,
* ``z' = (z + eta*mu*x) / (1 + eta*mu)`` plus a scaled coordinate gradient
  step (a proximal step for sample edges).

Dual variables are never materialised: every sequence is tracked through
its primal image (one vector per node and per token) and, for sample
edges, a scalar coordinate ``t_ij`` along the unit feature direction.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .clock import ClockState
from .exceptions import ParameterError
from .metrics import Trace, TraceRecord, stop_error
from .objective import (LOGISTIC, Problem, ReferenceSolution, loss_derivative, smoothness_profile,
                        solve_prox_root)
from .token_core import EVENT_BLOCK, draw_events, spawn_rngs, tvr_alpha


@dataclass(frozen=True)
class TavrParams:
    """Constants of the accelerated scheme.

    ``rho_comm``/``rho_comp`` are the predicted per-iteration rates of the
    two edge families; ``p_comm`` balances them.  ``strong_convexity`` is
    the dual strong convexity ``K / (2 sigma_tilde kappa_s)``,
    ``coord_const`` the smallest ``p_i^2 / (R_i L_i)`` over coordinates,
    ``tau`` the momentum weight and ``eta`` the momentum step.
    """

    n: int
    m: int
    K: int
    sigma: float
    sigma_tilde: float
    kappa_s: float
    L: float
    alpha: float
    p_comm: float
    p_comp: float
    rho_comm: float
    rho_comp: float
    strong_convexity: float
    R_comm: float
    coord_const: float
    tau: float
    eta: float
    y_rho_comm: float
    y_rho_comp: np.ndarray

    @property
    def rho(self) -> float:
        return min(self.rho_comm, self.rho_comp)


def balance_p_comm(n: int, m: int, kappa_s: float) -> float:
    """``p_comm`` equalising the two rate formulas.

    Solves ``p_comm / (2 n sqrt(kappa_s)) = p_comp / (sqrt(2) n (m + sqrt(m kappa_s)))``
    with ``p_comm + p_comp = 1``.
    """
    ratio = math.sqrt(2.0 * kappa_s) / (m + math.sqrt(m * kappa_s))
    return ratio / (1.0 + ratio)


def momentum_weight(strong_convexity: float, coord_const: float) -> float:
    """Positive root of ``tau^2 / (1 - tau) = strong_convexity * coord_const``."""
    q = strong_convexity * coord_const
    return 0.5 * (-q + math.sqrt(q * q + 4.0 * q))


def params_tavr(problem: Problem, K: int = 1, p_comm: float | None = None) -> TavrParams:
    if not 1 <= K <= problem.n:
        raise ParameterError(f"need 1 <= K <= n, got K={K}, n={problem.n}")
    n, m = problem.n, problem.m
    st = n * problem.sigma / (n + K)
    prof = smoothness_profile(problem)
    L = prof.global_L
    ks = 1.0 + L / st
    if p_comm is None:
        p_comm = balance_p_comm(n, m, ks)
    if not 0.0 < p_comm < 1.0:
        raise ParameterError("p_comm must lie in (0, 1)")
    p_comp = 1.0 - p_comm
    rho_comm = p_comm / (2.0 * n * math.sqrt(ks))
    rho_comp = p_comp / (math.sqrt(2.0) * n * (m + math.sqrt(m * ks)))
    alpha = tvr_alpha(K, st, ks)
    sc = K / (2.0 * st * ks)
    R_comm = (n + K - 1) / (n * K)
    # coordinate smoothness: 2/sigma_tilde on token edges, alpha(1 + L_ij/sigma_tilde) on samples
    c_comm = (p_comm / (n * K)) ** 2 * st / (2.0 * R_comm)
    c_comp = (p_comp / (n * m)) ** 2 / (alpha * (1.0 + float(prof.per_sample.max()) / st))
    c = min(c_comm, c_comp)
    tau = momentum_weight(sc, c)
    y_rho = st / (st + prof.per_sample)
    y_rho.setflags(write=False)
    return TavrParams(n, m, K, problem.sigma, st, ks, L, alpha, p_comm, p_comp, rho_comm,
                      rho_comp, sc, R_comm, c, tau, c / tau, 0.5, y_rho)


class _Sequence:
    """Primal image and sample coordinates of one dual sequence."""

    __slots__ = ("img", "t")

    def __init__(self, img: np.ndarray, t: np.ndarray):
        self.img = img
        self.t = t

    def copy(self) -> "_Sequence":
        return _Sequence(self.img.copy(), self.t.copy())


class TavrState:
    """State of an accelerated run.

    ``img`` arrays have shape ``(n + K, d)``: rows ``0..n-1`` are node
    parameters and rows ``n..n+K-1`` token parameters.
    """

    def __init__(self, problem: Problem, params: TavrParams, y: _Sequence, z: _Sequence,
                 positions: np.ndarray, event_rng: np.random.Generator,
                 tau: float | None = None, y_rho_comm: float | None = None,
                 y_rho_comp: ArrayLike | None = None):
        self.problem = problem
        self.params = params
        self.y = y
        self.z = z
        self.positions = positions
        self.event_rng = event_rng
        self.tau = params.tau if tau is None else float(tau)
        self.eta = params.coord_const / self.tau if self.tau > 0 else 0.0
        self.y_rho_comm = params.y_rho_comm if y_rho_comm is None else float(y_rho_comm)
        yr = params.y_rho_comp if y_rho_comp is None else y_rho_comp
        self.y_rho_comp = np.broadcast_to(np.asarray(yr, dtype=float), (problem.n, problem.m))
        self.comm_counts = np.zeros(params.K, dtype=np.int64)
        self.grad_counts = np.zeros(problem.n, dtype=np.int64)
        self.t_iter = 0
        X = problem.features
        self.xnorm = np.sqrt(np.einsum("imd,imd->im", X, X))
        safe = np.where(self.xnorm > 0, self.xnorm, 1.0)
        self.xhat = X / safe[:, :, None]
        prof = smoothness_profile(problem)
        self.mu = np.sqrt(params.alpha * prof.per_sample)
        self.active = self.mu > 0

    def copy(self) -> "TavrState":
        return copy.deepcopy(self)

    @property
    def t(self) -> int:
        return self.t_iter

    def theta(self, which: str = "y") -> np.ndarray:
        seq = self.y if which == "y" else self.z
        return seq.img[: self.problem.n]

    def tokens(self, which: str = "y") -> np.ndarray:
        seq = self.y if which == "y" else self.z
        return seq.img[self.problem.n:]

    def errors(self, theta_star: ArrayLike) -> tuple[float, float]:
        ts = np.asarray(theta_star)
        img = self.y.img
        n = self.problem.n
        en = float(np.mean(np.sum((img[:n] - ts) ** 2, axis=1)))
        et = float(np.mean(np.sum((img[n:] - ts) ** 2, axis=1)))
        return en, et

    def record(self, theta_star: ArrayLike, time: float = float("nan")) -> TraceRecord:
        en, et = self.errors(theta_star)
        total = int(self.comm_counts.sum())
        return TraceRecord(self.t_iter, en, et, total, total / self.params.K,
                           float(self.grad_counts.mean()), time)

    # scalar maps between the sample coordinate t and the primal scalar u = xhat @ v

    def _u_of_t(self, i: int, j: int, t: float) -> float:
        """Primal scalar matching dual coordinate ``t``: ``(g*)'(mu t)``."""
        prob = self.problem
        w, xn, lab = prob.weights[i, j], self.xnorm[i, j], prob.labels[i, j]
        v = self.mu[i, j] * t / (w * xn)
        if prob.loss_kind == LOGISTIC:
            a = -lab * v
            return -lab * (math.log(a) - math.log1p(-a)) / xn
        return (v + lab) / xn

    def _t_of_u(self, i: int, j: int, u: float) -> float:
        """Dual coordinate matching primal scalar ``u``: ``g'(u) / mu``."""
        prob = self.problem
        w, xn, lab = prob.weights[i, j], self.xnorm[i, j], prob.labels[i, j]
        return w * xn * float(loss_derivative(prob.loss_kind, xn * u, lab)) / self.mu[i, j]

    def _prox_t(self, i: int, j: int, a: float, lam: float) -> float:
        """``argmin_t lam * g*(mu t) + (t - a)^2 / 2`` via the primal prox of ``g``."""
        prob = self.problem
        mu = self.mu[i, j]
        w, xn, lab = prob.weights[i, j], self.xnorm[i, j], prob.labels[i, j]
        step = 1.0 / (lam * mu * mu)
        center = a / (lam * mu)
        r = solve_prox_root(prob.loss_kind, lab, step * w * xn * xn, xn * center)
        return a - lam * mu * (r / xn)


def init_tavr(problem: Problem, params: TavrParams, z0: ArrayLike | None = None, seed: int = 0,
              tau: float | None = None, y_rho_comm: float | None = None,
              y_rho_comp: ArrayLike | None = None) -> TavrState:
    """Start from virtual points ``z0`` (as in TVR); tokens start at 0.

    ``tau`` and the two ``y_rho`` arguments override the momentum weight and
    the step sizes of the ``y`` update; with ``tau=0`` and TVR's step sizes
    the scheme reduces to TVR.
    """
    n, m, d, K = problem.n, problem.m, problem.dim, params.K
    if z0 is None:
        zpts = np.zeros((n, m, d))
    else:
        z0 = np.asarray(z0, dtype=float)
        zpts = np.broadcast_to(z0, (n, m, d)).copy() if z0.shape == (d,) else z0.copy()
        if zpts.shape != (n, m, d):
            raise ParameterError(f"z0 must have shape ({d},) or ({n}, {m}, {d})")
    event_rng, pos_rng, _ = spawn_rngs(seed)
    positions = pos_rng.integers(0, n, size=K)
    state = TavrState(problem, params, _Sequence(np.zeros((n + K, d)), np.zeros((n, m))),
                      _Sequence(np.zeros((n + K, d)), np.zeros((n, m))), positions, event_rng,
                      tau, y_rho_comm, y_rho_comp)
    img = np.zeros((n + K, d))
    t = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            if not state.active[i, j]:
                continue
            u = float(state.xhat[i, j] @ zpts[i, j])
            t[i, j] = state._t_of_u(i, j, u)
            img[i] -= state.mu[i, j] * t[i, j] * state.xhat[i, j] / params.sigma_tilde
    state.y = _Sequence(img, t)
    state.z = _Sequence(img.copy(), t.copy())
    return state


def _mix(state: TavrState) -> _Sequence:
    tau = state.tau
    if tau == 0.0:
        return state.y.copy()
    return _Sequence(tau * state.z.img + (1.0 - tau) * state.y.img,
                     tau * state.z.t + (1.0 - tau) * state.y.t)


def _relax_z(state: TavrState, x: _Sequence) -> float:
    """``z <- (z + eta*mu*x)/(1 + eta*mu)``; returns the scale ``1/(1 + eta*mu)``."""
    em = state.eta * state.params.strong_convexity
    if state.tau == 0.0:
        return 1.0
    scale = 1.0 / (1.0 + em)
    z = state.z
    z.img *= scale
    z.img += (em * scale) * x.img
    z.t *= scale
    z.t += (em * scale) * x.t
    return scale


def _step_comm(state: TavrState, i: int, k: int) -> None:
    p = state.params
    n = p.n
    tau = state.tau
    if tau == 0.0:
        y = state.y
        shift = state.y_rho_comm * (y.img[i] - y.img[n + k])
        y.img[i] -= shift
        y.img[n + k] += shift
    else:
        x = _mix(state)
        grad = x.img[i] - x.img[n + k]
        scale = _relax_z(state, x)
        # dual step -(eta/p_i) * grad on the edge variable, mapped through the image
        step = scale * state.eta / (p.p_comm / (n * p.K)) / p.sigma_tilde
        state.z.img[i] -= step * grad
        state.z.img[n + k] += step * grad
        shift = state.y_rho_comm * grad
        x.img[i] -= shift
        x.img[n + k] += shift
        state.y = x
    state.comm_counts[k] += 1
    state.positions[k] = i


def _step_comp(state: TavrState, i: int, j: int) -> None:
    p = state.params
    state.grad_counts[i] += 1
    if not state.active[i, j]:
        return
    n = p.n
    mu = state.mu[i, j]
    xh = state.xhat[i, j]
    st = p.sigma_tilde
    tau = state.tau
    x = state.y if tau == 0.0 else _mix(state)
    tx = x.t[i, j]
    proj = float(xh @ x.img[i])
    if tau > 0.0:
        scale = _relax_z(state, x)
        lam = scale * state.eta / (p.p_comp / (n * p.m))
        w_pt = state.z.t[i, j]
        t_new = state._prox_t(i, j, w_pt + lam * mu * proj, lam)
        state.z.t[i, j] = t_new
        state.z.img[i] -= (mu * (t_new - w_pt) / st) * xh
    # y: dual-free relative step from x
    u = state._u_of_t(i, j, tx)
    r = state.y_rho_comp[i, j]
    u_new = (1.0 - r) * u + r * proj
    t_y = state._t_of_u(i, j, u_new)
    x.t[i, j] = t_y
    x.img[i] -= (mu * (t_y - tx) / st) * xh
    state.y = x


def tavr_step(state: TavrState) -> TavrState:
    """Sample one coordinate and apply the accelerated update."""
    p = state.params
    is_comm, node, other = draw_events(state.event_rng, p.p_comm, p.n, p.K, p.m, 1)
    apply_event(state, bool(is_comm[0]), int(node[0]), int(other[0]))
    return state


def apply_comm(state: TavrState, i: int, k: int) -> TavrState:
    """Accelerated update of the (node ``i``, token ``k``) coordinate."""
    return apply_event(state, True, i, k)


def apply_comp(state: TavrState, i: int, j: int) -> TavrState:
    """Accelerated update of the (node ``i``, sample ``j``) coordinate."""
    return apply_event(state, False, i, j)


def apply_event(state: TavrState, is_comm: bool, i: int, o: int) -> TavrState:
    if is_comm:
        _step_comm(state, i, o)
    else:
        _step_comp(state, i, o)
    state.t_iter += 1
    return state


def run_tavr(state: TavrState, reference: ReferenceSolution | None = None,
             eps: float | None = None, max_iters: int = 10_000_000,
             check_every: int | None = None, metric: str = "both", tau_comm: float = 1000.0,
             tau_comp: float = 1.0, label: str = "tavr") -> tuple[TavrState, Trace]:
    """Same contract as :func:`tokenwalk.token_core.run`; errors use the ``y`` image."""
    p = state.params
    check_every = p.n if check_every is None else check_every
    if check_every < 1:
        raise ParameterError("checkpoint cadence must be at least 1")
    if eps is not None and reference is None:
        raise ParameterError("an error target needs a reference solution")
    theta_star = np.zeros(state.problem.dim) if reference is None else reference.theta_star
    clock = ClockState(p.n, tau_comm, tau_comp, state.positions)
    trace = Trace(label, meta={"K": p.K, "n": p.n, "m": p.m, "tau": state.tau})

    def checkpoint() -> bool:
        rec = state.record(theta_star, clock.total)
        trace.append(rec)
        return eps is not None and stop_error(rec.err_node, rec.err_token, metric) <= eps

    if checkpoint():
        trace.reached = True
        return state, trace
    since = 0
    while state.t_iter < max_iters:
        block = min(EVENT_BLOCK, max_iters - state.t_iter)
        saved = state.event_rng.bit_generator.state
        is_comm, node, other = draw_events(state.event_rng, p.p_comm, p.n, p.K, p.m, block)
        for e in range(block):
            i, o = int(node[e]), int(other[e])
            if is_comm[e]:
                clock.move_token(o, i)
                _step_comm(state, i, o)
            else:
                clock.compute(i, 1)
                _step_comp(state, i, o)
            state.t_iter += 1
            since += 1
            if since == check_every:
                since = 0
                if checkpoint():
                    trace.reached = True
                    state.event_rng.bit_generator.state = saved
                    state.event_rng.random((e + 1, 3))
                    return state, trace
    if since:
        trace.reached = checkpoint()
    trace.truncated = eps is not None and not trace.reached
    return state, trace
