from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenwalk.exceptions import DataError, GraphError, MixingError, ParameterError
from tokenwalk.graph import (RandomWalk, build_conceptual, complete_graph, from_edge_list,
                             jumps_needed, mixing_deviation, random_walk, read_edge_list,
                             ring_graph)


def test_complete_and_ring_edges():
    assert complete_graph(3).edges == {(0, 1), (0, 2), (1, 2)}
    assert ring_graph(4).edges == {(0, 1), (1, 2), (2, 3), (0, 3)}
    assert complete_graph(4).is_complete and not ring_graph(4).is_complete


def test_disconnected_edge_list():
    with pytest.raises(GraphError):
        from_edge_list(3, [(0, 1)])


def test_bad_edges_rejected():
    with pytest.raises(GraphError):
        from_edge_list(3, [(0, 1), (1, 1), (1, 2)])
    with pytest.raises(GraphError):
        from_edge_list(3, [(0, 1), (1, 0), (1, 2)])
    with pytest.raises(GraphError):
        ring_graph(2)


def test_read_edge_list(tmp_path):
    f = tmp_path / "g.txt"
    f.write_text("0 1\n1 2\n# comment\n2 0\n")
    assert read_edge_list(f).edges == complete_graph(3).edges
    f.write_text("0 1\n1 x\n")
    with pytest.raises(DataError, match="line 2"):
        read_edge_list(f)


def test_complete_walk_is_uniform():
    rw = random_walk(complete_graph(6))
    np.testing.assert_allclose(rw.stationary, np.full(6, 1 / 6))
    jump = random_walk(complete_graph(6), "uniform_jump")
    assert jump.gamma == pytest.approx(1.0) and jump.mixing_const == 1.0


def test_even_ring_is_periodic():
    with pytest.warns(RuntimeWarning):
        rw = random_walk(ring_graph(4))
    # cycle eigenvalues are cos(2 pi k / 4): 1, 0, -1, 0
    np.testing.assert_allclose(np.sort(rw.eigenvalues), [-1, 0, 0, 1], atol=1e-12)
    assert rw.gamma == 0.0 and rw.periodic
    with pytest.raises(MixingError):
        jumps_needed(rw, 1e-3, 1.0)


def test_lazy_ring_gap_matches_eigensolver():
    rw = random_walk(ring_graph(5), "lazy", 0.5)
    np.testing.assert_allclose(rw.stationary, np.full(5, 0.2))
    ev = np.linalg.eigvals(rw.transition)
    slem = sorted(np.abs(ev))[-2]
    assert rw.gamma == pytest.approx(1 - slem, abs=1e-9)


def test_lazy_requires_beta():
    with pytest.raises(ParameterError):
        random_walk(ring_graph(5), "lazy", 1.0)


def test_jumps_needed_examples():
    rw = random_walk(complete_graph(4), "uniform_jump")
    assert jumps_needed(rw, 2.0, 2.0) == 1
    fake = RandomWalk(np.eye(2), np.array([0.5, 0.5]), 0.1, 2.0, "lazy", np.ones(2))
    assert jumps_needed(fake, 1e-3, 1.0) == 90 == math.ceil(10 * math.log(8000))


@pytest.mark.parametrize("n,beta", [(5, 0.5), (8, 0.3), (10, 0.5)])
def test_mixing_bound_after_jumps(n, beta):
    rw = random_walk(ring_graph(n), "lazy", beta)
    for eta_mu in (1e-1, 1e-3, 1e-5):
        t = jumps_needed(rw, eta_mu, 1.0)
        assert mixing_deviation(rw, t) <= eta_mu / 4


def test_stationarity_on_irregular_graph():
    g = from_edge_list(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3)])
    rw = random_walk(g, "lazy", 0.4)
    np.testing.assert_allclose(rw.transition.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(rw.stationary @ rw.transition, rw.stationary, atol=1e-10)
    # degrees (2, 3, 3, 3, 1)
    assert rw.mixing_const == pytest.approx(math.sqrt(3 / 1))


def test_conceptual_counts_and_path():
    cg = build_conceptual(3, 3, 2, 0.5, np.ones((3, 3)), 1.0)
    assert cg.num_nodes == 14 and cg.num_edges == 15
    path = build_conceptual(1, 1, 1, 2.0, np.array([[2.0]]), 1.0)
    assert path.num_nodes == 3 and path.num_edges == 2
    # degrees 1, 2, 1: token and computation node are leaves
    deg = np.count_nonzero(path.incidence, axis=1)
    assert sorted(deg.tolist()) == [1, 1, 2]


def test_conceptual_incidence_columns():
    L = np.array([[1.0, 2.0], [3.0, 0.5]])
    alpha = 0.7
    cg = build_conceptual(2, 2, 2, alpha, L, 0.4)
    for e in range(cg.num_edges):
        u, v = cg.edge_ends[e]
        col = np.zeros(cg.num_nodes)
        col[u], col[v] = cg.edge_weights[e], -cg.edge_weights[e]
        np.testing.assert_array_equal(cg.incidence[:, e], col)
    assert cg.edge_weights[cg.comp_edge(1, 0)] == pytest.approx(math.sqrt(alpha * 3.0))
    assert cg.edge_weights[cg.comm_edge(1, 1)] == 1.0
    strengths = cg.node_strengths
    assert np.all(strengths[: 2 + 2] == 0.4) and np.all(np.isnan(strengths[4:]))


def test_conceptual_rejects_too_many_tokens():
    with pytest.raises(ParameterError):
        build_conceptual(2, 1, 3, 1.0, np.ones((2, 1)), 1.0)


def test_bipartite_gram_example():
    cg = build_conceptual(5, 1, 3, 1.0, np.ones((5, 1)), 1.0)
    assert abs(cg.comm_gram_lambda_min() - 3) <= 1e-9


def _bipartite_lambda_min(n, K):
    # nonzero Laplacian spectrum of K_{n,K}: K (n-1 times), n (K-1 times), n+K
    cands = [n + K] + ([K] if n > 1 else []) + ([n] if K > 1 else [])
    return min(cands)


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_bipartite_spectrum_closed_form(nk):
    n, K = nk
    cg = build_conceptual(n, 1, K, 1.0, np.ones((n, 1)), 1.0)
    assert abs(cg.comm_gram_lambda_min() - _bipartite_lambda_min(n, K)) <= 1e-9


@given(st.integers(2, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_bipartite_spectrum_equals_token_count(nk):
    n, K = nk
    cg = build_conceptual(n, 1, K, 1.0, np.ones((n, 1)), 1.0)
    assert abs(cg.comm_gram_lambda_min() - K) <= 1e-9


def test_single_edge_token_block():
    # one node and one token: the block is a single edge, so the Gram matrix is [2]
    cg = build_conceptual(1, 1, 1, 1.0, np.ones((1, 1)), 1.0)
    assert cg.comm_gram_lambda_min() == pytest.approx(2.0)


@given(st.integers(3, 9), st.floats(0.05, 0.95))
def test_walk_invariants(n, beta):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for rw in (random_walk(ring_graph(n), "lazy", beta), random_walk(complete_graph(n))):
            assert np.max(np.abs(rw.transition.sum(1) - 1)) <= 1e-12
            assert np.max(np.abs(rw.stationary @ rw.transition - rw.stationary)) <= 1e-10
            assert 0 < rw.gamma <= 1
