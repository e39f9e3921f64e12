from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenwalk.baselines import (ExtraState, check_doubly_stochastic, extra_step, gd_round,
                                 make_config, metropolis_weights, run_baseline)
from tokenwalk.exceptions import ConfigError, ParameterError
from tokenwalk.graph import complete_graph, from_edge_list, ring_graph
from tokenwalk.objective import Problem, make_synthetic, smoothness_profile, solve_reference


@pytest.fixture(scope="module")
def ring_instance():
    p = make_synthetic(10, 20, 5, "logistic", seed=1, sigma=1e-3)
    return p, solve_reference(p, 1e-13), ring_graph(10)


def test_round_costs():
    p = make_synthetic(20, 2, 2, seed=0)
    a2a = make_config("gd_all_to_all", p)
    ring = make_config("gd_ring", p)
    assert (a2a.comm_cost_per_round, a2a.time_cost_per_round) == (380, 1)
    assert (ring.comm_cost_per_round, ring.time_cost_per_round) == (40, 40)
    assert make_config("extra", p, ring_graph(20)).comm_cost_per_round == 20
    w = make_config("walkman_grad", p)
    assert w.step_size == pytest.approx(1 / (smoothness_profile(p).global_L + p.sigma))
    with pytest.raises(ConfigError):
        make_config("extra", p)
    with pytest.raises(ParameterError):
        make_config("newton", p)


def test_all_to_all_counter_after_rounds():
    p = make_synthetic(20, 2, 2, seed=0)
    ref = solve_reference(p)
    tr = run_baseline("gd_all_to_all", p, ref, max_rounds=37, tau_comm=1.0, tau_comp=1.0)
    assert tr.last.comm_total == 37 * 380
    assert tr.last.time == pytest.approx(37 * (2 + 1))
    ring = run_baseline("gd_ring", p, ref, max_rounds=5, tau_comm=1.0, tau_comp=1.0)
    assert ring.last.comm_total == 200 and ring.last.time == pytest.approx(5 * (2 + 40))


def test_gd_round_identical_nodes_is_centralised_step():
    X = np.tile(np.array([[[1.0, 2.0], [0.5, -1.0]]]), (3, 1, 1))
    p = Problem(X, np.tile([[1.0, -1.0]], (3, 1)), np.ones((3, 2)), "logistic", 0.1)
    cfg = make_config("gd_all_to_all", p)
    theta = np.array([0.3, -0.2])
    states = np.tile(theta, (3, 1))
    expect = theta - cfg.step_size * (p.node_gradient(0, theta) + 0.1 * theta)
    np.testing.assert_allclose(gd_round(states, p, cfg), np.tile(expect, (3, 1)), rtol=1e-14)


@pytest.mark.parametrize("kind", ["gd_all_to_all", "gd_ring"])
def test_gd_converges(kind, ring_instance):
    p, ref, _ = ring_instance
    tr = run_baseline(kind, p, ref, eps=1e-17, max_rounds=100_000, metric="node")
    assert tr.reached and np.sqrt(tr.last.err_node) <= 1e-8


def test_extra_first_step():
    p = make_synthetic(5, 3, 2, seed=2)
    W = np.full((5, 5), 0.2)
    x0 = np.random.default_rng(0).normal(size=(5, 2))
    s = ExtraState(p, W, 0.1, x0)
    g = p.node_gradients(x0) + p.sigma * x0
    extra_step(s)
    np.testing.assert_allclose(s.x, x0.mean(axis=0) - 0.1 * g, rtol=1e-14)
    cfg = make_config("gd_all_to_all", p, step_size=0.1)
    np.testing.assert_allclose(s.x.mean(axis=0), gd_round(x0, p, cfg)[0], rtol=1e-13)


def test_extra_converges_on_ring(ring_instance):
    p, ref, g = ring_instance
    tr = run_baseline("extra", p, ref, graph=g, eps=1e-12, max_rounds=200_000, metric="node")
    assert tr.reached and np.sqrt(tr.last.err_node) <= 1e-6


def test_gd_and_extra_share_rate_on_ring(ring_instance):
    # condition number ~300 is far above the inverse gap of the ring mixing matrix
    p, ref, g = ring_instance
    step = make_config("gd_ring", p).step_size
    gd = run_baseline("gd_ring", p, ref, eps=1e-8, max_rounds=200_000, metric="node")
    ex = run_baseline("extra", p, ref, graph=g, eps=1e-8, max_rounds=200_000, metric="node",
                      step_size=step)
    assert gd.reached and ex.reached
    assert abs(ex.last.t - gd.last.t) <= 0.1 * gd.last.t


def test_mixing_matrix_validation():
    check_doubly_stochastic(metropolis_weights(ring_graph(6)))
    with pytest.raises(ParameterError):
        check_doubly_stochastic(np.array([[0.5, 0.5], [0.2, 0.8]]))
    with pytest.raises(ParameterError):
        check_doubly_stochastic(np.array([[1.5, -0.5], [-0.5, 1.5]]))
    with pytest.raises(ParameterError):
        ExtraState(make_synthetic(2, 1, 1), np.eye(3) * 0.5, 0.1)


@given(st.integers(3, 12), st.sets(st.tuples(st.integers(0, 11), st.integers(0, 11)), max_size=30))
def test_metropolis_weights_doubly_stochastic(n, extra_edges):
    pairs = {(i, i + 1) for i in range(n - 1)}
    pairs |= {(min(a, b), max(a, b)) for a, b in extra_edges if a < n and b < n and a != b}
    g = from_edge_list(n, sorted(pairs))
    W = metropolis_weights(g)
    check_doubly_stochastic(W)
    np.testing.assert_allclose(W, W.T)
    off = W - np.diag(np.diag(W))
    for a, b in zip(*np.nonzero(off)):
        assert (min(a, b), max(a, b)) in g.edges


def test_walkman_converges_complete_graph():
    p = make_synthetic(6, 10, 3, "quadratic", seed=3, sigma=0.1)
    ref = solve_reference(p, 1e-13)
    tr = run_baseline("walkman_grad", p, ref, graph=complete_graph(6), eps=1e-12,
                      max_rounds=500_000, metric="both", check_every=6)
    assert tr.reached and not tr.diverged


def test_walkman_sequential_time():
    p = make_synthetic(5, 7, 2, seed=0)
    ref = solve_reference(p)
    tr = run_baseline("walkman_grad", p, ref, graph=ring_graph(5), max_rounds=123,
                      tau_comm=10.0, tau_comp=0.5)
    assert tr.last.time == 123 * (10.0 + 7 * 0.5)
    assert tr.last.comm_total == 123


def test_walkman_tiny_step_is_slower():
    p = make_synthetic(6, 10, 3, "quadratic", seed=3, sigma=0.1, weight=10.0)
    ref = solve_reference(p, 1e-12)
    L = smoothness_profile(p).global_L + p.sigma
    g = complete_graph(6)
    base = run_baseline("walkman_grad", p, ref, graph=g, max_rounds=3000, seed=4)
    tiny = run_baseline("walkman_grad", p, ref, graph=g, max_rounds=3000, seed=4,
                        step_size=1.0 / L ** 2)
    assert tiny.last.err_node > 100 * base.last.err_node


def test_divergence_is_flagged():
    p = make_synthetic(6, 10, 3, "quadratic", seed=3, sigma=0.1)
    ref = solve_reference(p)
    tr = run_baseline("gd_all_to_all", p, ref, eps=1e-8, step_size=100.0, max_rounds=10_000)
    assert tr.diverged and not tr.reached
