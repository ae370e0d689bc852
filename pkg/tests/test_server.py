import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fedostc import graph, model, server
from fedostc.attention import AttentionParams
from fedostc.errors import BufferCorruptionError, LayoutMismatchError, MissingClientStateError
from fedostc.model import ModelConfig, ParamVector


# -- spatial evaluation --------------------------------------------------------

def test_single_node_self_only():
    res = server.evaluate_spatial(np.zeros((1, 3)), graph.self_only_graph(1), AttentionParams.init(3, 0))
    assert np.allclose(res.h_prime, 0.5) and res.alpha_self.tolist() == [1.0]


def test_isolated_nodes_squash_own_state():
    h = np.array([[0.5, -1.0], [2.0, 0.0]])
    res = server.evaluate_spatial(h, graph.self_only_graph(2), AttentionParams.init(2, 0))
    assert np.allclose(res.h_prime, [[oracles.sig(v) for v in row] for row in h], atol=1e-15)


def test_chain_matches_oracle_composition():
    rng = np.random.default_rng(1)
    g = graph.build_from_adjacency([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    p = AttentionParams(rng.normal(size=4))
    h = rng.normal(size=(3, 2))
    res = server.evaluate_spatial({i: h[i] for i in range(3)}, g, p)
    for n in range(3):
        nbrs = list(g.neighbors(n))
        _, hp = oracles.attention_for(list(p.a), h.tolist(), nbrs, n)
        assert np.allclose(res.h_prime[n], hp, atol=1e-14)


def test_missing_client_state():
    g = graph.self_only_graph(3)
    p = AttentionParams.init(2, 0)
    with pytest.raises(MissingClientStateError):
        server.evaluate_spatial({0: np.zeros(2), 2: np.zeros(2)}, g, p)
    with pytest.raises(MissingClientStateError):
        server.evaluate_spatial([np.zeros(2), None, np.zeros(2)], g, p)


# -- averaging and coefficients ------------------------------------------------

def test_average_examples():
    v = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(server.average_aggregate([v, v, v]), v)
    assert server.average_aggregate([[1.0, 3.0], [3.0, 5.0]]).tolist() == [2.0, 4.0]
    assert np.array_equal(server.average_aggregate([v]), v)


def test_average_rejects_mixed_layouts():
    with pytest.raises(LayoutMismatchError):
        server.average_aggregate([[1.0, 2.0], [1.0]])
    a = ParamVector(np.zeros(ModelConfig(enc_hidden=1, dec_hidden=1).layout.size),
                    ModelConfig(enc_hidden=1, dec_hidden=1).layout)
    b = model.init_params(ModelConfig(enc_hidden=2, dec_hidden=1), 0)
    with pytest.raises(LayoutMismatchError):
        server.average_aggregate([a, b])


def test_coefficients_examples():
    g = np.array([1.0, 2.0])
    assert np.allclose(server.correlation_coefficients([g, g, g], g), 1 / 3)
    rho = server.correlation_coefficients([[1.0, 2.0], [1.0, 3.0]], g)
    e = math.exp(-1)
    assert np.allclose(rho, [1 / (1 + e), e / (1 + e)], atol=1e-15)
    assert rho[0] == pytest.approx(0.7311, abs=1e-4)


def test_coefficients_survive_large_distances():
    rho = server.correlation_coefficients([[1e6], [1e6 + 1]], np.zeros(1))
    assert np.all(np.isfinite(rho)) and server.check_simplex(rho)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_coefficients_on_simplex_and_monotone(n, p, seed):
    rng = np.random.default_rng(seed)
    locals_ = rng.normal(0, 3, size=(n, p))
    glob = rng.normal(size=p)
    rho = server.correlation_coefficients(locals_, glob)
    assert server.check_simplex(rho)
    dist = np.linalg.norm(locals_ - glob, axis=1)
    for i in range(n):
        for j in range(n):
            if dist[i] < dist[j] - 1e-9:
                assert rho[i] > rho[j]


# -- buffer --------------------------------------------------------------------

def test_buffer_keeps_last_capacity_entries():
    buf = server.CorrelationBuffer(2)
    for k in range(3):
        buf.push(np.eye(2)[k % 2])
    assert len(buf) == 2 and buf.full
    assert buf.oldest().tolist() == [0.0, 1.0]


def test_buffer_rejects_off_simplex():
    buf = server.CorrelationBuffer(3)
    with pytest.raises(BufferCorruptionError):
        buf.push([0.6, 0.6])
    with pytest.raises(BufferCorruptionError):
        buf.push([1.5, -0.5])
    with pytest.raises(BufferCorruptionError):
        buf.oldest()


def test_buffer_entries_are_read_only():
    buf = server.CorrelationBuffer(1)
    buf.push([0.5, 0.5])
    with pytest.raises(ValueError):
        buf.oldest()[0] = 1.0


# -- period-aware aggregation ---------------------------------------------------

def run_rounds(uploads_per_round, period, force_uniform=False):
    buf = server.CorrelationBuffer(period)
    return [server.period_aware_aggregate(u, buf, t, force_uniform)
            for t, u in enumerate(uploads_per_round, start=1)], buf


def test_branches_and_buffer_timing():
    rng = np.random.default_rng(2)
    rounds = [rng.normal(size=(3, 4)) for _ in range(7)]
    outs, _ = run_rounds(rounds, 3)
    assert [o.branch for o in outs] == ["average"] * 3 + ["weighted"] * 4
    for t in range(3, 7):
        # round t+1 (0-based index t) uses the coefficients pushed at round t+1-3
        assert np.array_equal(outs[t].weights, outs[t - 3].rho)
        assert np.allclose(outs[t].params, outs[t - 3].rho @ rounds[t], atol=1e-15)
    for t in range(3):
        assert np.array_equal(outs[t].params, rounds[t].mean(axis=0))


def test_uniform_entry_equals_average():
    buf = server.CorrelationBuffer(1)
    buf.push(np.full(4, 0.25))
    up = np.random.default_rng(3).normal(size=(4, 5))
    out = server.period_aware_aggregate(up, buf, 2)
    assert out.branch == "weighted"
    assert np.allclose(out.params, server.average_aggregate(up), rtol=0, atol=1e-15)


def test_one_hot_entry_selects_that_upload():
    buf = server.CorrelationBuffer(1)
    buf.push([0.0, 1.0, 0.0])
    up = np.random.default_rng(4).normal(size=(3, 2))
    assert np.array_equal(server.period_aware_aggregate(up, buf, 2).params, up[1])


def test_long_period_is_pure_averaging():
    rng = np.random.default_rng(5)
    rounds = [rng.normal(size=(2, 3)) for _ in range(10)]
    outs, _ = run_rounds(rounds, 50)
    for o, u in zip(outs, rounds):
        assert o.branch == "average" and np.array_equal(o.params, u.mean(axis=0))


def test_forced_uniform_weighted_branch_matches_average():
    rng = np.random.default_rng(6)
    rounds = [rng.normal(size=(4, 3)) for _ in range(8)]
    outs, _ = run_rounds(rounds, 2, force_uniform=True)
    for o, u in zip(outs, rounds):
        assert np.max(np.abs(o.params - u.mean(axis=0))) < 1e-12


def test_out_of_sequence_round_is_rejected():
    buf = server.CorrelationBuffer(3)
    with pytest.raises(BufferCorruptionError):
        server.period_aware_aggregate(np.zeros((2, 2)), buf, 2)
    with pytest.raises(BufferCorruptionError):
        server.period_aware_aggregate(np.zeros((2, 2)), buf, 5)


# -- unrolled update ----------------------------------------------------------------

def test_unrolled_examples():
    w = np.array([1.0, 2.0])
    assert np.array_equal(server.unrolled_update(w, np.zeros((3, 2, 2)), np.full(3, 1 / 3), 0.1), w)
    g = np.array([[[0.5, -1.0]]])
    assert np.allclose(server.unrolled_update(w, g, [1.0], 0.1), w - 0.1 * g[0, 0])


def test_unrolled_rejects_bad_shapes():
    with pytest.raises(LayoutMismatchError):
        server.unrolled_update(np.zeros(2), np.zeros((3, 1, 4)), np.ones(3) / 3, 0.1)


def test_unrolled_identity_with_real_local_rounds():
    from fedostc.client import local_round
    cfg = ModelConfig(history_steps=4, forecast_steps=2, enc_hidden=3, dec_hidden=3)
    rng = np.random.default_rng(7)
    w_t = model.init_params(cfg, 7).values
    buf = server.CorrelationBuffer(1)
    buf.push(rng.dirichlet(np.ones(4)))
    res = local_round(cfg, w_t, rng.normal(size=(4, 4)), rng.normal(size=(4, 2)), 3, 0.2)
    out = server.period_aware_aggregate(res.params, buf, 2)
    unrolled = server.unrolled_update(w_t, res.gradients, out.weights, 0.2)
    assert np.max(np.abs(out.params - unrolled)) / max(1, np.max(np.abs(out.params))) < 1e-10


def test_server_average_mode_and_rho_dump(tmp_path):
    s = server.Server(graph.self_only_graph(2), None, np.zeros(2), period=2)
    s.aggregate(np.array([[1.0, 1.0], [3.0, 3.0]]), 1)
    assert s.global_params.tolist() == [2.0, 2.0]
    path = tmp_path / "rho.csv"
    server.write_rho_csv(path, s.rho_history)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,client,weight" and lines[1].startswith("1,0,")
    plain = server.Server(graph.self_only_graph(2), None, np.zeros(2), period=2, aggregation="average")
    for t in range(1, 5):
        assert plain.aggregate(np.array([[0.0, 2.0], [2.0, 0.0]]), t).branch == "average"
    with pytest.raises(RuntimeError):
        plain.spatial(np.zeros((2, 2)))
