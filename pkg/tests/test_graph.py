import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ivgae import tensor as T
from ivgae.config import ModelConfig
from ivgae.errors import GraphConstructionError
from ivgae.graph import (
    BipartiteGraph,
    GraphEmbeddings,
    GraphEncoder,
    LayerParams,
    build_graph,
    edge_dropout,
    message_pass_layer,
)
from ivgae.missingness import gen_mcar
from ivgae.synth import gaussian


def relu(x):
    return np.maximum(x, 0.0)


def dense_oracle(g: BipartiteGraph, P, Q, E, prm: dict) -> tuple:
    """Loop-based reference: concatenate, multiply, average over neighbours."""
    d = E.shape[1]
    h_s, h_f = np.zeros((g.n, d)), np.zeros((g.p, d))
    cnt_s, cnt_f = np.zeros(g.n), np.zeros(g.p)
    for k in range(g.n_edges):
        i, j = g.rows[k], g.cols[k]
        h_s[i] += relu(np.concatenate([Q[j], E[k]]) @ prm["w"] + prm["w_b"])
        h_f[j] += relu(np.concatenate([P[i], E[k]]) @ prm["wf"] + prm["wf_b"])
        cnt_s[i] += 1
        cnt_f[j] += 1
    h_s /= np.maximum(cnt_s, 1)[:, None]
    h_f /= np.maximum(cnt_f, 1)[:, None]
    P2 = relu(np.concatenate([P, h_s], axis=1) @ prm["w_hat"] + prm["w_hat_b"])
    Q2 = relu(np.concatenate([Q, h_f], axis=1) @ prm["q"] + prm["q_b"])
    E2 = np.stack([
        relu(np.concatenate([E[k], P2[g.rows[k]], Q2[g.cols[k]]]) @ prm["u"] + prm["u_b"])
        for k in range(g.n_edges)
    ]) if g.n_edges else np.zeros((0, d))
    return P2, Q2, E2


def random_layer(d: int, seed: int) -> LayerParams:
    params = LayerParams.init(np.random.default_rng(seed), d, 0)
    gen = np.random.default_rng(seed + 100)
    for p in params.parameters():
        p.data[...] = gen.normal(0, 0.5, size=p.shape)
    return params


def as_dict(params: LayerParams) -> dict:
    return {k: v.data for k, v in vars(params).items()}


def random_state(g: BipartiteGraph, d: int, seed: int):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(g.n, d)), gen.normal(size=(g.p, d)), gen.normal(size=(g.n_edges, d))


def run_layer(g, P, Q, E, params):
    return message_pass_layer(g, GraphEmbeddings(T.Tensor(P), T.Tensor(Q), T.Tensor(E), 0), params)


class TestBuild:
    def test_full(self):
        assert build_graph(np.ones((4, 3)), np.ones((4, 3))).n_edges == 12

    def test_mcar_exact(self):
        d = gaussian(4, 3, seed=0)
        mask = gen_mcar(d, 0.3, 0)
        assert build_graph(d.cells, mask.m).n_edges == 9

    def test_isolated_node(self):
        obs = np.ones((3, 3))
        obs[1] = 0
        with pytest.raises(GraphConstructionError, match="samples \\[1\\]"):
            build_graph(np.ones((3, 3)), obs)

    def test_edge_values(self):
        x = np.arange(6.0).reshape(2, 3)
        g = build_graph(x, np.array([[1, 0, 1], [1, 1, 1]]))
        np.testing.assert_array_equal(g.values, x[g.rows, g.cols])


class TestMessagePassing:
    def test_single_edge_hand_oracle(self):
        g = build_graph(np.array([[0.7]]), np.ones((1, 1)))
        d = 2
        params = LayerParams.init(np.random.default_rng(0), d, 0)
        eye2 = np.vstack([np.eye(d), np.eye(d)])
        for name in ("w", "wf", "w_hat", "q"):
            getattr(params, name).data[...] = eye2
        params.u.data[...] = np.vstack([np.eye(d)] * 3)
        P, Q, E = np.array([[1.0, -2.0]]), np.array([[0.5, 0.5]]), np.array([[0.7, -0.1]])
        out = run_layer(g, P, Q, E, params)
        # by hand: h_s = relu(q + e) = [1.2, 0.4]; h_f = relu(p + e) = [1.7, 0]
        np.testing.assert_allclose(out.P.data, [[2.2, 0.0]])
        np.testing.assert_allclose(out.Q.data, [[2.2, 0.5]])
        np.testing.assert_allclose(out.E.data, [[5.1, 0.4]])

    @given(st.integers(0, 500))
    def test_matches_loop_oracle(self, seed):
        d_data = gaussian(6, 4, seed=seed)
        g = build_graph(d_data.cells, gen_mcar(d_data, 0.3, seed).m)
        params = random_layer(3, seed)
        P, Q, E = random_state(g, 3, seed)
        out = run_layer(g, P, Q, E, params)
        ref = dense_oracle(g, P, Q, E, as_dict(params))
        for got, want in zip((out.P, out.Q, out.E), ref):
            np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_zero_weights(self):
        g = build_graph(np.ones((3, 2)), np.ones((3, 2)))
        params = LayerParams.init(np.random.default_rng(0), 4, 0)
        for p in params.parameters():
            p.data[...] = 0.0
        out = run_layer(g, *random_state(g, 4, 1), params)
        for t in (out.P, out.Q, out.E):
            assert np.all(t.data == 0.0)

    @given(st.integers(0, 500))
    def test_sample_permutation_equivariance(self, seed):
        d_data = gaussian(7, 3, seed=seed)
        m = gen_mcar(d_data, 0.3, seed).m
        perm = np.random.default_rng(seed).permutation(7)
        g = build_graph(d_data.cells, m)
        gp = build_graph(d_data.cells[perm], m[perm])
        params = random_layer(3, seed)
        P, Q, _ = random_state(g, 3, seed)
        gen = np.random.default_rng(seed + 7)
        E_cell = gen.normal(size=(7, 3, 3))  # per-cell edge state, so both graphs agree
        E = E_cell[g.rows, g.cols]
        Ep = E_cell[perm][gp.rows, gp.cols]
        a = run_layer(g, P, Q, E, params)
        b = run_layer(gp, P[perm], Q, Ep, params)
        np.testing.assert_allclose(b.P.data, a.P.data[perm], atol=1e-12)
        np.testing.assert_allclose(b.Q.data, a.Q.data, atol=1e-12)

    @given(st.integers(0, 500))
    def test_neighbour_order_bit_identical(self, seed):
        d_data = gaussian(12, 5, seed=seed)
        g = build_graph(d_data.cells, gen_mcar(d_data, 0.3, seed).m)
        order = np.random.default_rng(seed).permutation(g.n_edges)
        shuffled = g.subgraph(order)
        params = random_layer(8, seed)
        P, Q, E = random_state(g, 8, seed)
        a = run_layer(g, P, Q, E, params)
        b = run_layer(shuffled, P, Q, E[order], params)
        assert np.array_equal(a.P.data, b.P.data)
        assert np.array_equal(a.Q.data, b.Q.data)
        assert np.array_equal(a.E.data, b.E.data[np.argsort(order)])

    def test_isolated_after_dropout_zero_fallback(self):
        g = build_graph(np.ones((2, 2)), np.ones((2, 2)))
        sub = g.subgraph(g.rows == 0)
        out = run_layer(sub, *random_state(g, 3, 0)[:2], np.ones((sub.n_edges, 3)), random_layer(3, 0))
        assert out.fallbacks == 1

    def test_gradients_reach_every_layer(self):
        d_data = gaussian(5, 3, seed=0)
        g = build_graph(d_data.cells, np.ones((5, 3)))
        gen = np.random.default_rng(0)
        enc = GraphEncoder(3, 3, gen, hidden=4, layers=2)
        p_in = T.Tensor(d_data.cells)
        vals = T.Tensor(g.values)
        w = gen.normal(size=(5, 4))
        f = lambda: T.sum(T.mul(enc(g, enc.lift_samples(p_in), vals).P, T.Tensor(w)))  # noqa: E731
        report = T.grad_check(f, enc.parameters(), step=1e-5, tol=1e-4, max_elems=None)
        assert report.passed, report.max_rel_err
        T.backward(f())
        for layer in enc.layers:
            for name in ("w", "w_hat", "q", "u"):
                assert np.any(getattr(layer, name).grad != 0), name

    def test_default_depth_and_width(self):
        cfg = ModelConfig()
        assert (cfg.encoder_layers, cfg.hidden) == (3, 64)


class TestEdgeDropout:
    def graph(self):
        return build_graph(np.ones((20, 5)), np.ones((20, 5)))

    def test_rate_zero(self):
        g = self.graph()
        train, held = edge_dropout(g, 0.0, 0, 0)
        assert train is g and held.n_edges == 0

    def test_exact_count(self):
        train, held = edge_dropout(self.graph(), 0.3, 0, 0)
        assert held.n_edges == 30 and train.n_edges == 70

    def test_deterministic_per_epoch(self):
        g = self.graph()
        a = edge_dropout(g, 0.3, 1, 5)[1].cells
        assert np.array_equal(a, edge_dropout(g, 0.3, 1, 5)[1].cells)
        assert not np.array_equal(a, edge_dropout(g, 0.3, 1, 6)[1].cells)

    def test_one_hot_cells_drop_together(self):
        values = np.eye(3)[[0, 1, 2, 1]]
        cells = np.repeat(np.arange(4)[:, None], 3, axis=1)
        g = build_graph(values, np.ones((4, 3)), cells=cells)
        _, held = edge_dropout(g, 0.5, 0, 0)
        assert np.array_equal(np.bincount(held.cells)[np.unique(held.cells)], [3, 3])

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            edge_dropout(self.graph(), 1.0, 0, 0)

    @given(st.integers(0, 10_000))
    def test_partition(self, epoch):
        g = self.graph()
        train, held = edge_dropout(g, 0.3, 2, epoch)
        assert sorted(np.concatenate([train.cells, held.cells]).tolist()) == sorted(g.cells.tolist())
