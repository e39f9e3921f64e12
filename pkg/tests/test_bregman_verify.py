from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenwalk import bregman_verify as bv
from tokenwalk.exceptions import DomainError, ParameterError
from tokenwalk.objective import Problem, make_synthetic, smoothness_profile
from tokenwalk.token_core import (comm_update, comp_update, dual_invariant, init_state,
                                  params_tgd, params_tvr)


def _dual(n, m, d, K, seed, sigma=0.1):
    problem = make_synthetic(n, m, d, "quadratic", seed=seed, sigma=sigma)
    par = params_tvr(problem, K)
    return bv.DualProblem(problem, K, par.alpha, par.sigma_tilde), par


# --- divergences ------------------------------------------------------------

def test_divergence_of_point_with_itself_is_zero():
    h = bv.QuadraticFunction(np.diag([1.0, 3.0]), np.array([0.5, -1.0]))
    assert bv.bregman_div(h, [0.2, 0.7], [0.2, 0.7]) == 0.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
       st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_half_squared_norm_divergence(a, b):
    h = bv.QuadraticFunction(np.eye(4), np.zeros(4))
    expect = 0.5 * float(np.sum((np.array(a) - np.array(b)) ** 2))
    assert bv.bregman_div(h, a, b) == pytest.approx(expect, rel=1e-9, abs=1e-6)


def _logistic_conjugate_direct(v, y):
    a = -y * v
    return a * math.log(a) + (1 - a) * math.log(1 - a)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.sampled_from([-1.0, 1.0]),
       st.floats(0.1, 3.0), st.floats(0.2, 2.0), st.floats(0.1, 2.0))
def test_logistic_conjugate_divergence(a1, a2, y, w, xn, mu):
    h = bv.ScaledConjugate("logistic", y, w, xn, mu)
    # t such that -y * mu t / (w xn) = a
    t1, t2 = -y * a1 * w * xn / mu, -y * a2 * w * xn / mu
    div = bv.bregman_div(h, t1, t2)
    assert div >= -1e-12
    v1, v2 = mu * t1 / (w * xn), mu * t2 / (w * xn)
    dconj = -y * (math.log(a2) - math.log1p(-a2))  # derivative of l* at v2
    direct = w * (_logistic_conjugate_direct(v1, y) - _logistic_conjugate_direct(v2, y)
                  - dconj * (v1 - v2))
    assert div == pytest.approx(direct, abs=1e-12)


def test_logistic_conjugate_domain():
    h = bv.ScaledConjugate("logistic", 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        h.value(0.5)  # -y v must lie in [0, 1]
    with pytest.raises(DomainError):
        bv.bregman_div(h, -0.5, -1.5)


# --- dual problem and steps -------------------------------------------------

def test_dual_problem_errors():
    p = make_synthetic(2, 1, 2, "quadratic", seed=0)
    with pytest.raises(ParameterError):
        bv.DualProblem(p, 3, 0.5)
    zero = Problem(np.zeros((2, 1, 2)), np.zeros((2, 1)), np.ones((2, 1)), "quadratic", 0.1)
    with pytest.raises(ParameterError):
        bv.DualProblem(zero, 1, 0.5)
    logi = make_synthetic(2, 1, 2, "logistic", seed=0)
    with pytest.raises(ParameterError):
        bv.DualProblem(logi, 1, 0.5).hessian_f()


def test_gradient_matches_finite_differences():
    dp, _ = _dual(2, 2, 2, 1, 3)
    lam = np.random.default_rng(0).normal(size=dp.size)
    g = dp.grad(lam)
    for k in range(dp.size):
        e = np.zeros(dp.size)
        e[k] = 1e-6
        fd = (dp.value(lam + e) - dp.value(lam - e)) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_zero_gradient_state_is_unchanged():
    dp, _ = _dual(2, 2, 2, 2, 1)
    lam = dp.optimum()
    assert np.max(np.abs(dp.grad(lam))) <= 1e-10
    cfg = bv.bound_config(dp)
    f0 = dp.value(lam)
    for b in range(len(dp.blocks)):
        nxt = bv.bcd_step(dp, lam, b, cfg)
        np.testing.assert_allclose(nxt, lam, atol=1e-10)
        assert dp.value(nxt) == pytest.approx(f0, abs=1e-12)


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_dual_and_image_steps_agree(kind):
    problem = make_synthetic(3, 2, 2, kind, seed=2, sigma=0.1)
    par = params_tvr(problem, 2)
    dp = bv.DualProblem(problem, 2, par.alpha, par.sigma_tilde)
    state = init_state(problem, par, seed=0)
    lam = dp.from_token_state(state)
    # uniform sample choice may exceed the per-coordinate bound; equivalence holds regardless
    cfg = bv.token_config(dp, par.p_comm, par.eta, check_bound=False)
    rng = np.random.default_rng(1)
    img, u = dp.image(lam), bv.primal_scalars(dp, lam)
    for _ in range(200):
        b = int(rng.integers(len(dp.blocks)))
        lam = bv.bcd_step(dp, lam, b, cfg)
        img, u = bv.bcd_step_image(dp, img, u, b, cfg)
        np.testing.assert_allclose(img, dp.image(lam), atol=1e-12)
        np.testing.assert_allclose(u, bv.primal_scalars(dp, lam), atol=1e-10)


def test_token_edge_step_is_pairwise_mixing():
    dp, par = _dual(3, 1, 2, 2, 4)
    cfg = bv.token_config(dp, par.p_comm, par.eta)
    lam = np.random.default_rng(2).normal(size=dp.size)
    n, K = 3, 2
    i, k = 1, 1
    theta = dp.image(lam)
    e = np.zeros(n + K)
    e[i], e[n + k] = 1.0, -1.0
    W = np.outer(e, e)
    expect = theta - (par.eta * n * K / (par.p_comm * par.sigma_tilde)) * W @ theta
    after = dp.image(bv.bcd_step(dp, lam, dp.block_index("comm", i, k), cfg))
    np.testing.assert_allclose(after, expect, atol=1e-13)


def test_uniform_sample_choice_can_exceed_bound():
    dp, par = _dual(3, 2, 2, 2, 2)
    cfg = bv.token_config(dp, par.p_comm, par.eta, check_bound=False)
    ratio = par.eta / bv.step_bounds(dp, cfg)
    assert ratio.max() > 1.0
    comm = [b for b, blk in enumerate(dp.blocks) if blk.kind == "comm"]
    assert ratio[comm].max() <= 1.0 + 1e-12


def test_step_bound_enforced():
    dp, _ = _dual(2, 1, 2, 1, 0)
    cfg = bv.bound_config(dp, scale=1.5)
    with pytest.raises(ParameterError):
        bv.bcd_step(dp, np.zeros(dp.size), 0, cfg)
    nb = len(dp.blocks)
    with pytest.raises(ParameterError):
        bv.BcdConfig(np.full(nb, 0.5), np.full(nb, 0.5), 0.1)
    with pytest.raises(ParameterError):
        bv.BcdConfig(np.full(nb, 1 / nb), np.full(nb, 0.5 / nb), 0.1)


# --- primal-dual equivalence ------------------------------------------------

def test_coupled_run_single_node_path():
    problem = make_synthetic(1, 1, 3, "quadratic", seed=0, sigma=0.2)
    for par in (params_tgd(problem, 1), params_tvr(problem, 1)):
        worst, devs = bv.coupled_run(problem, par, steps=500, seed=3)
        assert len(devs) == 500 and worst <= 1e-10


@pytest.mark.parametrize("n,m,K,kind", [(3, 2, 2, "quadratic"), (4, 1, 1, "logistic"),
                                        (2, 3, 2, "logistic")])
def test_coupled_run_tvr(n, m, K, kind):
    problem = make_synthetic(n, m, 2, kind, seed=n + m, sigma=0.05)
    worst, _ = bv.coupled_run(problem, params_tvr(problem, K), steps=1500, seed=1)
    assert worst <= 1e-10


def test_coupled_run_tgd_needs_single_sample():
    problem = make_synthetic(3, 2, 2, "quadratic", seed=0)
    with pytest.raises(ParameterError):
        bv.coupled_run(problem, params_tgd(problem, 1))
    single = make_synthetic(3, 1, 2, "quadratic", seed=0)
    assert bv.coupled_run(single, params_tgd(single, 2), steps=1000)[0] <= 1e-10


def test_token_invariant_matches_dual_image():
    problem = make_synthetic(3, 2, 2, "logistic", seed=6, sigma=0.05)
    par = params_tvr(problem, 2)
    dp = bv.DualProblem(problem, 2, par.alpha, par.sigma_tilde)
    state = init_state(problem, par, seed=2)
    cfg = bv.token_config(dp, par.p_comm, par.eta, check_bound=False)
    lam = dp.from_token_state(state)
    rng = np.random.default_rng(5)
    for _ in range(300):
        b = int(rng.integers(len(dp.blocks)))
        blk = dp.blocks[b]
        (comm_update if blk.kind == "comm" else comp_update)(state, blk.node, blk.other)
        lam = bv.bcd_step(dp, lam, b, cfg)
        _, t = dp.split(lam)
        dual_side = (par.sigma_tilde * dp.image(lam).sum(0)
                     + np.einsum("im,imd->d", dp.mu * t, dp.xhat))
        np.testing.assert_allclose(dual_invariant(state), dual_side, atol=1e-10)
        assert np.max(np.abs(dual_side)) <= 1e-10


# --- monotonicity and contraction ------------------------------------------

def test_monotonicity_at_bound_and_negative_control():
    dp, _ = _dual(2, 2, 2, 1, 5)
    rep = bv.check_monotonicity(dp, bv.bound_config(dp, per_block=True), trials=300)
    assert rep.passed and rep.values["violations"] == 0
    bad = bv.check_monotonicity(dp, bv.bound_config(dp, per_block=True, scale=10.0,
                                                    check_bound=False), trials=300)
    assert not bad.passed and bad.values["violations"] > 0


def test_contraction_token_instance():
    dp, _ = _dual(2, 1, 2, 1, 0)
    cfg = bv.bound_config(dp)
    rep = bv.check_contraction(dp, cfg, horizon=50)
    assert rep.passed
    assert rep.values["max_expected_ratio"] < 1.0


def test_exact_sampling_factor():
    dp, _ = _dual(2, 1, 2, 1, 0)
    cfg = bv.bound_config(dp)
    assert cfg.Delta == 0.0 and cfg.delta == 0.0
    mu = 0.37
    eta = cfg.scalar_eta()
    assert bv.contraction_factor(dp, cfg, mu) == pytest.approx(
        max(1 - eta * mu, 1 - bv.R_p(dp, cfg)), rel=1e-14)


def test_misspecified_sampling_keeps_half_rate():
    dp, _ = _dual(2, 1, 2, 1, 0)
    nb = len(dp.blocks)
    sample = np.full(nb, 1.0 / nb)
    mu = float(dp.relative_spectrum()[0].min())
    base = bv.bound_config(dp, sample)
    eta0 = base.scalar_eta()
    infl = np.random.default_rng(3).uniform(0, 1, nb)
    infl *= 0.4 * eta0 * mu / float(sample @ infl)  # Delta = 0.4 eta mu
    lr = sample * (1 + infl)
    bounds = lr / np.array([b.L_rel * b.R for b in dp.blocks])
    cfg = bv.BcdConfig(sample, lr, float(bounds.min()))
    eta = cfg.scalar_eta()
    assert cfg.Delta < eta * mu / 2
    rep = bv.check_contraction(dp, cfg, horizon=40, mu=mu)
    assert rep.passed
    assert rep.values["max_expected_ratio"] <= max(1 - eta * mu / 2, 1 - bv.R_p(dp, cfg)) + 1e-12


# --- constants --------------------------------------------------------------

def test_constants_on_passing_instance():
    dp, _ = _dual(2, 1, 2, 1, 0)
    rep = bv.check_constants(dp, samples=3000)
    v = rep.values
    assert rep.passed
    assert v["structural_identity_max_residual"] <= 1e-9
    assert v["rayleigh_max_relative_error"] <= 1e-8
    assert v["eigvector_ratio_max_relative_error"] <= 1e-8
    assert v["directional_smoothness_max_ratio_to_formula"] <= 1 + 1e-6
    assert v["comm_gram_lambda_min"] == pytest.approx(1.0)


@pytest.mark.parametrize("inst", [(2, 1, 2, 1, 0), (2, 2, 3, 2, 1), (3, 1, 2, 1, 2),
                                  (3, 2, 2, 2, 3), (3, 2, 3, 1, 4), (2, 2, 2, 1, 5)])
def test_certified_strong_convexity_holds(inst):
    dp, _ = _dual(*inst)
    st_ = dp.sigma_tilde
    kappa_s = smoothness_profile(dp.problem).kappa_s(st_)
    cert = dp.K / (2 * st_ * kappa_s)
    vals, vecs = dp.relative_spectrum()
    assert vals.min() >= cert * (1 - 1e-9)
    # the smallest eigenvector attains the Rayleigh quotient exactly
    v = vecs[:, np.argmin(vals)]
    Hf, Hh = dp.hessian_f(), dp.hessian_h()
    assert (v @ Hf @ v) / (v @ Hh @ v) == pytest.approx(vals.min(), rel=1e-9)


def test_report_formatting():
    rep = bv.Report("demo", False, {"x": 1.5, "ok": np.bool_(True), "n": 3})
    assert rep.lines() == ["demo: FAIL", "  x = 1.500000e+00", "  ok = True", "  n = 3"]
    assert rep.rows()[0] == ("demo", "x", "1.500000e+00")
