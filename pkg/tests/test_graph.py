import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedostc import graph
from fedostc.errors import (
    AsymmetricInputError,
    NegativeDistanceError,
    NonBinaryEntryError,
    NonSquareError,
)


def test_single_node_gets_self_loop():
    g = graph.build_from_adjacency([[0]])
    assert g.neighbor_sets == ((0,),)
    assert g.adjacency[0, 0] == 1


def test_directed_edge_feeds_target_only():
    # e_{1,2} = 1 (0-based: adjacency[0, 1])
    g = graph.build_from_adjacency([[0, 1], [0, 0]])
    assert g.neighbors(0) == (0,)
    assert g.neighbors(1) == (0, 1)


def test_undirected_chain_middle_node():
    chain = [[0, 1, 0], [1, 0, 1], [0, 1, 0]]
    g = graph.build_from_adjacency(chain)
    assert g.neighbors(1) == (0, 1, 2)
    assert g.neighbors(0) == (0, 1)


@pytest.mark.parametrize("bad, exc", [
    ([[0, 1, 0], [1, 0, 1]], NonSquareError),
    ([[0, 2], [1, 0]], NonBinaryEntryError),
    ([[0, 0.5], [1, 0]], NonBinaryEntryError),
    (np.zeros((0, 0)), NonSquareError),
])
def test_build_rejects(bad, exc):
    with pytest.raises(exc):
        graph.build_from_adjacency(bad)


def test_graph_is_immutable():
    g = graph.build_from_adjacency([[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        g.adjacency[0, 1] = 0


@settings(max_examples=60, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 8)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 1)))
def test_neighbor_sets_contain_self_and_rebuild_is_idempotent(mat):
    g = graph.build_from_adjacency(mat)
    for n in range(g.n_clients):
        nbrs = g.neighbors(n)
        assert n in nbrs
        assert list(nbrs) == sorted(nbrs)
        expected = sorted({m for m in range(g.n_clients) if mat[m, n] == 1} | {n})
        assert list(nbrs) == expected
    again = graph.build_from_adjacency(g.adjacency)
    assert again.neighbor_sets == g.neighbor_sets
    assert np.array_equal(again.adjacency, g.adjacency)


def test_kernel_all_zero_distance_is_fully_connected():
    adj = graph.build_gaussian_kernel(np.zeros((4, 4)), sigma=1.0, threshold=0.5)
    assert adj.sum() == 16


def test_kernel_threshold_one_keeps_only_self_loops():
    d = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], dtype=float)
    adj = graph.build_gaussian_kernel(d, sigma=1.0, threshold=1.0)
    assert np.array_equal(adj, np.eye(3))


def test_kernel_hand_evaluated_example():
    # exp(-1) ~ 0.368 >= 0.3 keeps 1-2; exp(-100) drops the rest
    assert math.exp(-1) >= 0.3 > math.exp(-100)
    d = np.array([[0, 1, 10], [1, 0, 10], [10, 10, 0]], dtype=float)
    adj = graph.build_gaussian_kernel(d, sigma=1.0, threshold=0.3)
    assert adj.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]


def test_kernel_rejects_bad_distances():
    with pytest.raises(NegativeDistanceError):
        graph.build_gaussian_kernel([[0, -1], [-1, 0]], sigma=1.0)
    with pytest.raises(AsymmetricInputError):
        graph.build_gaussian_kernel([[0, 1], [2, 0]], sigma=1.0)


def test_default_sigma_is_sample_std_of_offdiagonal():
    d = np.array([[0, 1, 3], [1, 0, 2], [3, 2, 0]], dtype=float)
    assert graph.default_sigma(d) == pytest.approx(np.std([1, 3, 1, 2, 3, 2], ddof=1))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_kernel_output_symmetric(n, seed):
    pts = np.random.default_rng(seed).uniform(size=(n, 2))
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    adj = graph.build_gaussian_kernel(d)
    assert np.array_equal(adj, adj.T)
    assert np.all(np.diag(adj) == 1)


def test_csv_round_trip(tmp_path):
    adj = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    path = tmp_path / "adj.csv"
    graph.write_matrix_csv(path, adj, fmt="{:d}")
    assert path.read_text().splitlines()[0] == "0,1,0"
    g = graph.load_adjacency_csv(path)
    assert g.neighbors(0) == (0, 2)
    dist = tmp_path / "d.csv"
    graph.write_matrix_csv(dist, [[0, 1.5], [1.5, 0]])
    assert graph.load_distance_csv(dist)[0, 1] == 1.5
