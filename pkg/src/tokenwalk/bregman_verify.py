"""Numerical checks of Bregman coordinate descent on the consensus dual.

The dual variable has one ``d``-vector per (node, token) edge and one
scalar per (node, sample) edge.  A sample edge only needs a scalar
because the conjugate of a generalized linear function is finite only on
the span of its feature vector; the scalar ``t_ij`` is the coordinate
along the unit feature direction.  The primal image of a dual point is

    theta_i = (sum_k lam_ik - sum_j mu_ij t_ij xhat_ij) / sigma_tilde
    theta_k = -(sum_i lam_ik) / sigma_tilde        (token k)

and the dual objective is ``sigma_tilde/2 ||theta||^2 + sum_ij g*_ij(mu_ij t_ij)``
with ``g_ij(u) = f_ij(u * xhat_ij)``.  The reference function is
``h = 1/2 ||lam||_P^2 + sum_ij (L_ij / mu_ij^2) g*_ij(mu_ij t_ij)`` where
``P`` projects onto the row space of the token-edge incidence matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .exceptions import DomainError, ParameterError
from .graph import build_conceptual, smallest_positive_eigenvalue
from .objective import (QUADRATIC, Problem, loss_conjugate, loss_conjugate_derivative,
                        loss_derivative, smoothness_profile)
from .token_core import TGD, AlgoParams, RunState, comm_update, comp_update, draw_events, init_state

FloatArray = NDArray[np.float64]


class Convex(Protocol):
    def value(self, x: ArrayLike) -> float: ...

    def grad(self, x: ArrayLike) -> FloatArray: ...


@dataclass(frozen=True)
class QuadraticFunction:
    """``1/2 x^T Q x + b^T x``."""

    Q: np.ndarray
    b: np.ndarray

    def value(self, x: ArrayLike) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.b @ x)

    def grad(self, x: ArrayLike) -> FloatArray:
        return self.Q @ np.asarray(x, dtype=float) + self.b


@dataclass(frozen=True)
class ScaledConjugate:
    """``scale * g*(mu t)`` for one sample, with ``g(u) = w l(|x| u)``.

    Arguments outside the conjugate's domain raise :class:`DomainError`.
    """

    loss_kind: str
    label: float
    weight: float
    xnorm: float
    mu: float
    scale: float = 1.0

    def value(self, t: ArrayLike) -> float:
        s = self.mu * np.asarray(t, dtype=float)
        v = s / (self.weight * self.xnorm)
        return float(np.sum(self.scale * self.weight * loss_conjugate(self.loss_kind, v,
                                                                         self.label)))

    def grad(self, t: ArrayLike) -> FloatArray:
        s = self.mu * np.asarray(t, dtype=float)
        v = s / (self.weight * self.xnorm)
        d = loss_conjugate_derivative(self.loss_kind, v, self.label) / self.xnorm
        return np.asarray(self.scale * self.mu * d, dtype=float)


def bregman_div(h: Convex | tuple[Callable, Callable], a: ArrayLike, b: ArrayLike) -> float:
    """``h(a) - h(b) - grad h(b) . (a - b)``."""
    if isinstance(h, tuple):
        value, grad = h
    else:
        value, grad = h.value, h.grad
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(value(a) - value(b) - np.sum(np.asarray(grad(b)) * (a - b)))


# ---------------------------------------------------------------------------
# the dual problem


@dataclass(frozen=True)
class Block:
    """One coordinate block: a token edge (``d`` entries) or a sample edge (1 entry)."""

    kind: str
    node: int
    other: int
    indices: slice
    R: float
    L_rel: float


class DualProblem:
    """Dense representation of the dual for tiny instances."""

    def __init__(self, problem: Problem, K: int, alpha: float, sigma_tilde: float | None = None):
        n, m, d = problem.n, problem.m, problem.dim
        if not 1 <= K <= n:
            raise ParameterError(f"need 1 <= K <= n, got K={K}")
        self.problem = problem
        self.n, self.m, self.d, self.K = n, m, d, K
        self.alpha = float(alpha)
        self.sigma_tilde = n * problem.sigma / (n + K) if sigma_tilde is None else sigma_tilde
        prof = smoothness_profile(problem)
        self.L_sample = prof.per_sample
        self.conceptual = build_conceptual(n, m, K, alpha, prof, self.sigma_tilde)
        X = problem.features
        self.xnorm = np.sqrt(np.einsum("imd,imd->im", X, X))
        if np.any(self.xnorm == 0):
            raise ParameterError("zero feature vectors have no dual coordinate")
        self.xhat = X / self.xnorm[:, :, None]
        self.mu = np.sqrt(alpha * self.L_sample)
        self.n_comm = n * K * d
        self.size = self.n_comm + n * m
        st = self.sigma_tilde
        M = np.zeros(((n + K) * d, self.size))
        eye = np.eye(d)
        for i in range(n):
            for k in range(K):
                c = self.comm_slice(i, k)
                M[i * d:(i + 1) * d, c] = eye
                M[(n + k) * d:(n + k + 1) * d, c] = -eye
            for j in range(m):
                M[i * d:(i + 1) * d, self.comp_index(i, j)] = -self.mu[i, j] * self.xhat[i, j]
        self.M = M
        A_comm = self.conceptual.comm_block()
        P = np.linalg.pinv(A_comm) @ A_comm
        self.P_scalar = P
        self.R_comm = float(P[0, 0])
        self.P = np.kron(P, eye)
        self.terms = [[ScaledConjugate(problem.loss_kind, problem.labels[i, j],
                                       problem.weights[i, j], self.xnorm[i, j], self.mu[i, j])
                       for j in range(m)] for i in range(n)]
        self.h_terms = [[ScaledConjugate(problem.loss_kind, problem.labels[i, j],
                                         problem.weights[i, j], self.xnorm[i, j], self.mu[i, j],
                                         self.L_sample[i, j] / self.mu[i, j] ** 2)
                         for j in range(m)] for i in range(n)]
        blocks = []
        for i in range(n):
            for k in range(K):
                blocks.append(Block("comm", i, k, self.comm_slice(i, k), self.R_comm,
                                    2.0 / (st * self.R_comm)))
        for i in range(n):
            for j in range(m):
                idx = self.comp_index(i, j)
                blocks.append(Block("comp", i, j, slice(idx, idx + 1), 1.0,
                                    self.alpha * (1.0 + self.L_sample[i, j] / st)))
        self.blocks = tuple(blocks)

    # layout

    def comm_slice(self, i: int, k: int) -> slice:
        start = (i * self.K + k) * self.d
        return slice(start, start + self.d)

    def comp_index(self, i: int, j: int) -> int:
        return self.n_comm + i * self.m + j

    def block_index(self, kind: str, i: int, o: int) -> int:
        return i * self.K + o if kind == "comm" else self.n * self.K + i * self.m + o

    def split(self, lam: ArrayLike) -> tuple[FloatArray, FloatArray]:
        lam = np.asarray(lam, dtype=float)
        return lam[: self.n_comm], lam[self.n_comm:].reshape(self.n, self.m)

    # objective and reference

    def image(self, lam: ArrayLike) -> FloatArray:
        """Primal image ``(n + K, d)``: node rows then token rows."""
        return (self.M @ np.asarray(lam, dtype=float) / self.sigma_tilde).reshape(-1, self.d)

    def value(self, lam: ArrayLike) -> float:
        img = self.image(lam)
        _, t = self.split(lam)
        val = 0.5 * self.sigma_tilde * float(np.sum(img * img))
        for i in range(self.n):
            for j in range(self.m):
                val += self.terms[i][j].value(t[i, j])
        return val

    def grad(self, lam: ArrayLike) -> FloatArray:
        g = self.M.T @ self.image(lam).ravel()
        _, t = self.split(lam)
        for i in range(self.n):
            for j in range(self.m):
                g[self.comp_index(i, j)] += float(self.terms[i][j].grad(t[i, j]))
        return g

    def h_value(self, lam: ArrayLike) -> float:
        x, t = self.split(lam)
        val = 0.5 * float(x @ self.P @ x)
        for i in range(self.n):
            for j in range(self.m):
                val += self.h_terms[i][j].value(t[i, j])
        return val

    def h_grad(self, lam: ArrayLike) -> FloatArray:
        x, t = self.split(lam)
        out = np.empty(self.size)
        out[: self.n_comm] = self.P @ x
        for i in range(self.n):
            for j in range(self.m):
                out[self.comp_index(i, j)] = float(self.h_terms[i][j].grad(t[i, j]))
        return out

    @property
    def f(self) -> tuple[Callable, Callable]:
        return self.value, self.grad

    @property
    def h(self) -> tuple[Callable, Callable]:
        return self.h_value, self.h_grad

    # quadratic-case matrices

    def _require_quadratic(self) -> None:
        if self.problem.loss_kind != QUADRATIC:
            raise ParameterError("closed-form dual checks need quadratic losses")

    def hessian_f(self) -> FloatArray:
        self._require_quadratic()
        H = self.M.T @ self.M / self.sigma_tilde
        idx = np.arange(self.n_comm, self.size)
        H[idx, idx] += self.alpha
        return H

    def hessian_h(self) -> FloatArray:
        H = np.zeros((self.size, self.size))
        H[: self.n_comm, : self.n_comm] = self.P
        idx = np.arange(self.n_comm, self.size)
        H[idx, idx] = 1.0
        return H

    def optimum(self) -> FloatArray:
        """A minimiser of the dual (minimum-norm on the token-edge kernel)."""
        self._require_quadratic()
        b = self.grad(np.zeros(self.size))
        sol, *_ = np.linalg.lstsq(self.hessian_f(), -b, rcond=None)
        return sol

    def relative_spectrum(self) -> tuple[FloatArray, FloatArray]:
        """Generalised eigenpairs of ``(H_f, H_h)`` on the range of ``H_h``."""
        Hf, Hh = self.hessian_f(), self.hessian_h()
        w, V = np.linalg.eigh(Hh)
        Q = V[:, w > 1e-10]
        vals, vecs = scipy.linalg.eigh(Q.T @ Hf @ Q, Q.T @ Hh @ Q)
        return vals, Q @ vecs

    def from_token_state(self, state: RunState) -> FloatArray:
        """Dual point whose image is the state of a token run started with tokens at 0.

        Valid as long as no communication has happened: then all token-edge
        variables are zero and ``t_ij`` follows from the virtual points.
        """
        lam = np.zeros(self.size)
        prob = self.problem
        for i in range(self.n):
            for j in range(self.m):
                z = state.z[i, j] if state.params.samples_per_node > 1 else state.z[i, 0]
                u = float(self.xhat[i, j] @ z)
                g = prob.weights[i, j] * self.xnorm[i, j] * float(
                    loss_derivative(prob.loss_kind, self.xnorm[i, j] * u, prob.labels[i, j]))
                lam[self.comp_index(i, j)] = g / self.mu[i, j]
        return lam


# ---------------------------------------------------------------------------
# coordinate descent


@dataclass(frozen=True)
class BcdConfig:
    """Sampling probabilities, learning-rate probabilities and step.

    ``eta`` may be a scalar or one value per block.  With ``check_bound``
    the step must satisfy ``eta <= p_i / (L_i R_i)`` for every block.
    """

    sample_probs: np.ndarray
    lr_probs: np.ndarray
    eta: float | np.ndarray
    check_bound: bool = True

    def __post_init__(self):
        ps = np.asarray(self.sample_probs, dtype=float)
        pl = np.asarray(self.lr_probs, dtype=float)
        if ps.shape != pl.shape or ps.ndim != 1:
            raise ParameterError("probability vectors must be 1-D and aligned")
        if abs(ps.sum() - 1.0) > 1e-12 or np.any(ps <= 0):
            raise ParameterError("sampling probabilities must be positive and sum to 1")
        if np.any(pl < ps * (1 - 1e-12)):
            raise ParameterError("learning-rate probabilities must dominate sampling ones")
        object.__setattr__(self, "sample_probs", ps)
        object.__setattr__(self, "lr_probs", pl)

    @property
    def deltas(self) -> FloatArray:
        return np.maximum(self.lr_probs / self.sample_probs - 1.0, 0.0)

    @property
    def Delta(self) -> float:
        return float(self.sample_probs @ self.deltas)

    @property
    def delta(self) -> float:
        return float(self.deltas.min())

    def step(self, b: int) -> float:
        return float(np.broadcast_to(self.eta, self.sample_probs.shape)[b])

    def scalar_eta(self) -> float:
        return float(np.min(self.eta))


def step_bounds(dp: DualProblem, config: BcdConfig) -> FloatArray:
    """``p_i / (L_i R_i)`` for every block."""
    return np.array([config.lr_probs[b] / (blk.L_rel * blk.R) for b, blk in enumerate(dp.blocks)])


def R_p(dp: DualProblem, config: BcdConfig) -> float:
    return float(min(config.sample_probs[b] / blk.R for b, blk in enumerate(dp.blocks)))


def token_config(dp: DualProblem, p_comm: float, eta: float, check_bound: bool = True
                 ) -> BcdConfig:
    """Uniform sampling of the token algorithms: ``p_comm/(nK)`` and ``p_comp/(nm)``."""
    probs = np.array([p_comm / (dp.n * dp.K) if b.kind == "comm"
                      else (1.0 - p_comm) / (dp.n * dp.m) for b in dp.blocks])
    return BcdConfig(probs, probs, eta, check_bound)


def bound_config(dp: DualProblem, sample_probs: ArrayLike | None = None, scale: float = 1.0,
                 per_block: bool = False, check_bound: bool = True) -> BcdConfig:
    """Exact sampling with the step at ``scale`` times the bound.

    ``per_block`` uses each block's own bound instead of the smallest.
    """
    if sample_probs is None:
        sample_probs = np.full(len(dp.blocks), 1.0 / len(dp.blocks))
    probs = np.asarray(sample_probs, dtype=float)
    bounds = np.array([probs[b] / (blk.L_rel * blk.R) for b, blk in enumerate(dp.blocks)])
    eta = scale * (bounds if per_block else bounds.min())
    return BcdConfig(probs, probs, eta, check_bound)


def bcd_step(dp: DualProblem, lam: ArrayLike, block: int, config: BcdConfig) -> FloatArray:
    """Mirror coordinate step ``grad h(x') = grad h(x) - (eta/p_i) P grad_i f(x)``.

    On token edges the minimal-norm solution ``x' = x - (eta/p_i) grad_i f``
    is taken; on sample edges the scalar mirror equation is inverted in
    closed form through the primal loss derivative.
    """
    blk = dp.blocks[block]
    eta = config.step(block)
    if config.check_bound and eta > config.lr_probs[block] / (blk.L_rel * blk.R) * (1 + 1e-12):
        raise ParameterError(f"step {eta:.3e} exceeds the bound of block {block}")
    lam = np.array(lam, dtype=float)
    scale = eta / config.lr_probs[block]
    if blk.kind == "comm":
        img = dp.image(lam)
        g = img[blk.node] - img[dp.n + blk.other]
        lam[blk.indices] -= scale * g
        return lam
    i, j = blk.node, blk.other
    idx = dp.comp_index(i, j)
    g = float(dp.grad(lam)[idx])
    hterm = dp.h_terms[i][j]
    target = float(hterm.grad(lam[idx])) - scale * g
    lam[idx] = _invert_h_grad(dp, i, j, target)
    return lam


def _invert_h_grad(dp: DualProblem, i: int, j: int, target: float) -> float:
    """Solve ``(L/mu) (g*)'(mu t) = target`` for ``t``: ``t = g'(mu target / L) / mu``."""
    prob = dp.problem
    mu, L = dp.mu[i, j], dp.L_sample[i, j]
    u = mu * target / L
    xn = dp.xnorm[i, j]
    gprime = prob.weights[i, j] * xn * float(loss_derivative(prob.loss_kind, xn * u,
                                                             prob.labels[i, j]))
    return gprime / mu


def bcd_step_image(dp: DualProblem, img: FloatArray, u: FloatArray, block: int,
                   config: BcdConfig) -> tuple[FloatArray, FloatArray]:
    """The same step expressed on the primal image and the primal scalars ``u``.

    Token edge: pairwise averaging with weight ``eta / (p_i sigma_tilde)``.
    Sample edge: ``u' = (1 - r) u + r xhat.theta_i`` with ``r = eta alpha / p_i``,
    then ``theta_i -= (g'(u') - g'(u)) xhat / sigma_tilde``.
    """
    blk = dp.blocks[block]
    eta = config.step(block)
    img = img.copy()
    u = u.copy()
    if blk.kind == "comm":
        r = eta / (config.lr_probs[block] * dp.sigma_tilde)
        a, b = blk.node, dp.n + blk.other
        diff = r * (img[a] - img[b])
        img[a] -= diff
        img[b] += diff
        return img, u
    i, j = blk.node, blk.other
    prob = dp.problem
    r = eta * dp.alpha / config.lr_probs[block]
    xh = dp.xhat[i, j]
    old = u[i, j]
    new = (1.0 - r) * old + r * float(xh @ img[i])
    xn, w, lab = dp.xnorm[i, j], prob.weights[i, j], prob.labels[i, j]
    gp = lambda v: w * xn * float(loss_derivative(prob.loss_kind, xn * v, lab))  # noqa: E731
    img[i] -= (gp(new) - gp(old)) * xh / dp.sigma_tilde
    u[i, j] = new
    return img, u


def primal_scalars(dp: DualProblem, lam: ArrayLike) -> FloatArray:
    """``u_ij = (g*)'(mu t_ij)``, the primal scalar of each sample edge."""
    _, t = dp.split(lam)
    out = np.empty((dp.n, dp.m))
    for i in range(dp.n):
        for j in range(dp.m):
            out[i, j] = float(dp.terms[i][j].grad(t[i, j])) / dp.mu[i, j]
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"{self.name}: {status}"]
        out += [f"  {k} = {_fmt(v)}" for k, v in self.values.items()]
        return out

    def rows(self) -> list[tuple[str, str, str]]:
        return [(self.name, k, _fmt(v)) for k, v in self.values.items()]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return str(v)


def _random_state(dp: DualProblem, rng: np.random.Generator, scale: float = 1.0) -> FloatArray:
    return scale * rng.standard_normal(dp.size)


def check_monotonicity(dp: DualProblem, config: BcdConfig, trials: int = 1000,
                       rng: np.random.Generator | int | None = 0, tol: float = 1e-10) -> Report:
    """Every coordinate step from random states must not increase the dual objective."""
    rng = np.random.default_rng(rng)
    worst = 0.0
    increases = 0
    for _ in range(trials):
        lam = _random_state(dp, rng)
        f0 = dp.value(lam)
        for b in range(len(dp.blocks)):
            f1 = dp.value(bcd_step(dp, lam, b, config))
            rel = (f1 - f0) / max(1.0, abs(f0))
            if rel > 0:
                worst = max(worst, rel)
            if rel > tol:
                increases += 1
    return Report("monotonicity", worst <= tol,
                  {"trials": trials, "blocks": len(dp.blocks), "max_relative_increase": worst,
                   "violations": increases, "tolerance": tol})


def lyapunov(dp: DualProblem, config: BcdConfig, lam: ArrayLike, lam_star: ArrayLike,
             f_star: float) -> float:
    eta = config.scalar_eta()
    return ((1.0 + config.delta) * bregman_div(dp.h, lam_star, lam)
            + eta / R_p(dp, config) * (dp.value(lam) - f_star))


def contraction_factor(dp: DualProblem, config: BcdConfig, mu: float) -> float:
    eta = config.scalar_eta()
    return max((1.0 + config.Delta - eta * mu) / (1.0 + config.delta), 1.0 - R_p(dp, config))


def check_contraction(dp: DualProblem, config: BcdConfig, horizon: int = 50,
                      rng: np.random.Generator | int | None = 0, mu: float | None = None,
                      start: ArrayLike | None = None, tol: float = 1e-10) -> Report:
    """Exact expected Lyapunov decrease along a sampled trajectory.

    ``mu`` defaults to the exact relative strong convexity (smallest
    generalised eigenvalue).  The expectation over the next coordinate is
    enumerated exhaustively with the sampling probabilities.
    """
    rng = np.random.default_rng(rng)
    if mu is None:
        mu = float(dp.relative_spectrum()[0].min())
    lam_star = dp.optimum()
    f_star = dp.value(lam_star)
    factor = contraction_factor(dp, config, mu)
    lam = _random_state(dp, rng) if start is None else np.asarray(start, dtype=float)
    worst_ratio = 0.0
    worst_excess = -math.inf
    nb = len(dp.blocks)
    for _ in range(horizon):
        cur = lyapunov(dp, config, lam, lam_star, f_star)
        nxt = [bcd_step(dp, lam, b, config) for b in range(nb)]
        expect = sum(config.sample_probs[b] * lyapunov(dp, config, nxt[b], lam_star, f_star)
                     for b in range(nb))
        if cur <= 1e-300:
            break
        ratio = expect / cur
        worst_ratio = max(worst_ratio, ratio)
        worst_excess = max(worst_excess, ratio - factor)
        lam = nxt[int(rng.choice(nb, p=config.sample_probs))]
    return Report("contraction", worst_excess <= tol,
                  {"horizon": horizon, "mu": mu, "eta": config.scalar_eta(),
                   "Delta": config.Delta, "delta": config.delta, "R_p": R_p(dp, config),
                   "bound_factor": factor, "max_expected_ratio": worst_ratio,
                   "max_excess": worst_excess, "tolerance": tol})


def check_constants(dp: DualProblem, samples: int = 10_000,
                    rng: np.random.Generator | int | None = 0, mu_claim: float | None = None
                    ) -> Report:
    """Structural identity, relative constants and the token-block spectrum.

    ``mu_claim`` defaults to ``alpha / 2``.  Both the sampled minimum of
    ``D_f / D_h`` and the exact generalised eigenvalue are compared with
    it; ``mu_certified = K / (2 sigma_tilde kappa_s)`` is reported too.
    """
    rng = np.random.default_rng(rng)
    st = dp.sigma_tilde
    mu_claim = dp.alpha / 2.0 if mu_claim is None else mu_claim
    kappa_s = 1.0 + float(dp.L_sample.sum(axis=1).max()) / st
    mu_cert = dp.K / (2.0 * st * kappa_s)
    values: dict = {}
    ok = True

    # (a) structural identity at random states, every block
    eq10 = 0.0
    probs = np.full(len(dp.blocks), 1.0 / len(dp.blocks))
    cfg = bound_config(dp, probs)
    Pfull = dp.hessian_h() if dp.problem.loss_kind == QUADRATIC else None
    for _ in range(max(1, samples // 100)):
        lam = _random_state(dp, rng)
        g = dp.grad(lam)
        for b, blk in enumerate(dp.blocks):
            nxt = bcd_step(dp, lam, b, cfg)
            gi = np.zeros_like(g)
            gi[blk.indices] = g[blk.indices]
            lhs = float(gi @ Pfull @ (lam - nxt))
            rhs = blk.R * float(g @ (lam - nxt))
            eq10 = max(eq10, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    values["structural_identity_max_residual"] = eq10
    ok &= eq10 <= 1e-9

    # (b) relative constants by sampling, compared with the dense eigensolver
    vals, vecs = dp.relative_spectrum()
    lo, hi = float(vals.min()), float(vals.max())
    Hf, Hh = dp.hessian_f(), dp.hessian_h()
    sampled_min = math.inf
    sampled_max = 0.0
    rayleigh_err = 0.0
    for _ in range(samples):
        a = _random_state(dp, rng)
        b = _random_state(dp, rng)
        dh = bregman_div(dp.h, a, b)
        if dh <= 1e-12:
            continue
        r = bregman_div(dp.f, a, b) / dh
        v = a - b
        rq = float(v @ Hf @ v) / float(v @ Hh @ v)
        rayleigh_err = max(rayleigh_err, abs(r - rq) / max(1.0, rq))
        sampled_min = min(sampled_min, r)
        sampled_max = max(sampled_max, r)
    base = _random_state(dp, rng)
    eig_err = 0.0
    for val, vec in ((lo, vecs[:, 0]), (hi, vecs[:, -1])):
        r = bregman_div(dp.f, base + vec, base) / bregman_div(dp.h, base + vec, base)
        eig_err = max(eig_err, abs(r - val) / max(1.0, abs(val)))
    within = sampled_min >= lo - 1e-8 * max(1.0, lo) and sampled_max <= hi * (1 + 1e-8)
    values.update({"mu_claim": mu_claim, "mu_sampled_min": sampled_min, "mu_exact": lo,
                   "mu_certified": mu_cert, "max_ratio_exact": hi,
                   "rayleigh_max_relative_error": rayleigh_err,
                   "eigvector_ratio_max_relative_error": eig_err,
                   "sampled_within_spectrum": within})
    ok &= rayleigh_err <= 1e-8 and eig_err <= 1e-8 and within
    claim_ok = sampled_min >= mu_claim - 1e-6 and lo >= mu_claim - 1e-9
    cert_ok = lo >= mu_cert - 1e-9
    values["mu_claim_holds"] = claim_ok
    values["mu_certified_holds"] = cert_ok
    ok &= claim_ok and cert_ok

    # per-direction smoothness on every block
    worst_dir = 0.0
    for blk in dp.blocks:
        for _ in range(max(1, samples // (10 * len(dp.blocks)))):
            x = _random_state(dp, rng)
            v = np.zeros(dp.size)
            width = blk.indices.stop - blk.indices.start
            v[blk.indices] = rng.standard_normal(width)
            r = bregman_div(dp.f, x + v, x) / bregman_div(dp.h, x + v, x)
            worst_dir = max(worst_dir, r / blk.L_rel)
    values["directional_smoothness_max_ratio_to_formula"] = worst_dir
    ok &= worst_dir <= 1.0 + 1e-6

    # (c) token-block spectrum
    lam_min = dp.conceptual.comm_gram_lambda_min()
    values["comm_gram_lambda_min"] = lam_min
    values["comm_gram_lambda_min_error"] = abs(lam_min - dp.K)
    ok &= abs(lam_min - dp.K) <= 1e-9
    return Report("constants", bool(ok), values)


# ---------------------------------------------------------------------------
# coupled primal/dual runs


def coupled_run(problem: Problem, params: AlgoParams, steps: int = 500, seed: int = 0
                ) -> tuple[float, list[float]]:
    """Run a token algorithm and dual coordinate descent on the same events.

    Returns the largest deviation between the token state and the dual
    image over all steps, and the per-step deviations.  TGD is covered when
    every node holds a single sample, so that its node function is itself
    a generalized linear function.
    """
    if params.variant == TGD and problem.m != 1:
        raise ParameterError("the TGD dual uses one sample per node")
    dp = DualProblem(problem, params.K, params.alpha, params.sigma_tilde)
    cfg = token_config(dp, params.p_comm, params.eta, check_bound=False)
    state = init_state(problem, params, seed=seed)
    lam = dp.from_token_state(state)
    devs = []
    is_comm, node, other = draw_events(np.random.default_rng(seed), params.p_comm, params.n,
                                       params.K, params.samples_per_node, steps)
    for e in range(steps):
        i, o = int(node[e]), int(other[e])
        if is_comm[e]:
            comm_update(state, i, o)
            b = dp.block_index("comm", i, o)
        else:
            comp_update(state, i, o)
            b = dp.block_index("comp", i, o)
        lam = bcd_step(dp, lam, b, cfg)
        img = dp.image(lam)
        dev = max(float(np.max(np.abs(img[: params.n] - state.theta))),
                  float(np.max(np.abs(img[params.n:] - state.tokens))))
        devs.append(dev)
    return max(devs) if devs else 0.0, devs

