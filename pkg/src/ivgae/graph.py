"""Bipartite sample-feature graph and trilateral message passing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import GraphConstructionError
from .hetembed import glorot, zeros
from .rng import rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BipartiteGraph:
    """Observed cells as edges between sample node ``rows[e]`` and feature node ``cols[e]``.

    ``values`` holds the edge scalars at construction time; when the feature
    vectors are differentiable the model re-gathers them through the tape.
    ``cells`` maps every edge to the table cell it came from, so that a
    categorical cell expanded into several one-hot edges is dropped as a unit.
    """

    n: int
    p: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    cells: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.rows.size)

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.bincount(self.rows, minlength=self.n),
            np.bincount(self.cols, minlength=self.p),
        )

    def isolated(self) -> tuple[np.ndarray, np.ndarray]:
        ds, df = self.degrees()
        return np.flatnonzero(ds == 0), np.flatnonzero(df == 0)

    def subgraph(self, keep: np.ndarray) -> BipartiteGraph:
        return BipartiteGraph(
            self.n, self.p, self.rows[keep], self.cols[keep], self.values[keep], self.cells[keep]
        )

    @cached_property
    def row_plan(self) -> T.IndexPlan:
        return T.IndexPlan(self.rows, self.n, tiebreak=self.cols)

    @cached_property
    def col_plan(self) -> T.IndexPlan:
        return T.IndexPlan(self.cols, self.p, tiebreak=self.rows)

    def adjacency_lists(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        order_s = np.argsort(self.rows, kind="stable")
        order_f = np.argsort(self.cols, kind="stable")
        ds, df = self.degrees()
        return (
            np.split(self.cols[order_s], np.cumsum(ds)[:-1]),
            np.split(self.rows[order_f], np.cumsum(df)[:-1]),
        )


def build_graph(features: np.ndarray, observed: np.ndarray, cells: np.ndarray | None = None) -> BipartiteGraph:
    """Create one edge per observed entry of ``features`` (n x p)."""
    features = np.asarray(features, dtype=np.float64)
    observed = np.asarray(observed).astype(bool)
    if features.shape != observed.shape:
        raise GraphConstructionError(f"features {features.shape} vs mask {observed.shape}")
    n, p = features.shape
    rows, cols = np.nonzero(observed)
    cell_ids = rows * p + cols if cells is None else np.asarray(cells)[rows, cols]
    g = BipartiteGraph(n, p, rows.astype(np.int64), cols.astype(np.int64), features[rows, cols], cell_ids)
    bad_s, bad_f = g.isolated()
    if bad_s.size or bad_f.size:
        raise GraphConstructionError(
            f"isolated nodes: samples {bad_s[:5].tolist()} features {bad_f[:5].tolist()}"
        )
    return g


def edge_dropout(
    g: BipartiteGraph, rate: float, seed: int, epoch: int = 0, retries: int = 10
) -> tuple[BipartiteGraph, BipartiteGraph]:
    """Hold out floor(rate * #cells) observed cells from message passing.

    Returns (train graph, held-out graph).  Draws come from the epoch-indexed
    ``dropout`` stream; a draw that isolates a node is retried up to
    ``retries`` times and then accepted as is.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"edge dropout rate must lie in [0, 1), got {rate}")
    cells = np.unique(g.cells)
    k = math.floor(rate * cells.size)
    if k == 0:
        return g, g.subgraph(np.zeros(g.n_edges, dtype=bool))
    gen = rng(seed, "dropout", epoch)
    for _ in range(retries + 1):
        drop_cells = gen.choice(cells, size=k, replace=False)
        held = np.isin(g.cells, drop_cells)
        train = g.subgraph(~held)
        bad_s, bad_f = train.isolated()
        if not bad_s.size and not bad_f.size:
            break
    return train, g.subgraph(held)


@dataclass
class GraphEmbeddings:
    P: T.Tensor
    Q: T.Tensor
    E: T.Tensor
    layer: int
    fallbacks: int = 0


@dataclass
class LayerParams:
    w: T.Tensor
    w_b: T.Tensor
    wf: T.Tensor
    wf_b: T.Tensor
    w_hat: T.Tensor
    w_hat_b: T.Tensor
    q: T.Tensor
    q_b: T.Tensor
    u: T.Tensor
    u_b: T.Tensor

    @classmethod
    def init(cls, gen, d: int, k: int) -> LayerParams:
        return cls(
            glorot(gen, 2 * d, d, f"mp{k}.W"),
            zeros(d, f"mp{k}.W_b"),
            glorot(gen, 2 * d, d, f"mp{k}.Wf"),
            zeros(d, f"mp{k}.Wf_b"),
            glorot(gen, 2 * d, d, f"mp{k}.What"),
            zeros(d, f"mp{k}.What_b"),
            glorot(gen, 2 * d, d, f"mp{k}.Q"),
            zeros(d, f"mp{k}.Q_b"),
            glorot(gen, 3 * d, d, f"mp{k}.U"),
            zeros(d, f"mp{k}.U_b"),
        )

    def parameters(self) -> list[T.Tensor]:
        return list(vars(self).values())


def _dense(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.relu(T.add_bias(x @ w, b))


def _blocks(w: T.Tensor, d: int, k: int) -> list[T.Tensor]:
    return [T.slice_rows(w, i * d, (i + 1) * d) for i in range(k)]


def _edge_dense(node_terms, edge_term: T.Tensor, b: T.Tensor) -> T.Tensor:
    acc = edge_term
    for table, idx in node_terms:
        acc = acc + T.gather_rows(table, idx)
    return T.relu(T.add_bias(acc, b))


def message_pass_layer(g: BipartiteGraph, emb: GraphEmbeddings, params: LayerParams) -> GraphEmbeddings:
    """One round of sample/feature/edge updates.

    h_i = mean_j relu(W [q_j, e_ij]);  h_j = mean_i relu(Wf [p_i, e_ij])
    p_i <- relu(What [p_i, h_i]);  q_j <- relu(Q [q_j, h_j])
    e_ij <- relu(U [e_ij, p_i, q_j])
    Nodes without live edges aggregate to a zero vector.
    """
    P, Qf, E = emb.P, emb.Q, emb.E
    d = E.shape[1]
    # [a_idx, b] @ W == (a @ W_top)[idx] + b @ W_bottom; node-side products stay small
    w_q, w_e = _blocks(params.w, d, 2)
    msg_s = _edge_dense([(Qf @ w_q, g.col_plan)], E @ w_e, params.w_b)
    h_s, empty_s = T.segment_mean(msg_s, g.row_plan, g.n)
    wf_p, wf_e = _blocks(params.wf, d, 2)
    msg_f = _edge_dense([(P @ wf_p, g.row_plan)], E @ wf_e, params.wf_b)
    h_f, empty_f = T.segment_mean(msg_f, g.col_plan, g.p)
    if empty_s or empty_f:
        logger.debug("zero-vector fallback for %d sample / %d feature nodes", empty_s, empty_f)
    P_new = _dense(T.concat([P, h_s], axis=1), params.w_hat, params.w_hat_b)
    Q_new = _dense(T.concat([Qf, h_f], axis=1), params.q, params.q_b)
    u_e, u_p, u_q = _blocks(params.u, d, 3)
    E_new = _edge_dense([(P_new @ u_p, g.row_plan), (Q_new @ u_q, g.col_plan)], E @ u_e, params.u_b)
    return GraphEmbeddings(P_new, Q_new, E_new, emb.layer + 1, emb.fallbacks + empty_s + empty_f)


class GraphEncoder:
    """Layer-0 lifts plus a stack of message-passing layers."""

    def __init__(self, in_dim: int, n_features: int, gen: np.random.Generator, hidden: int = 64, layers: int = 3):
        self.hidden = hidden
        self.lift = glorot(gen, in_dim, hidden, "enc.lift")
        self.lift_b = zeros(hidden, "enc.lift_b")
        self.q0 = T.parameter(gen.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_features, hidden)), "enc.q0")
        self.edge_w = glorot(gen, 1, hidden, "enc.edge_w")
        self.edge_b = zeros(hidden, "enc.edge_b")
        self.layers = [LayerParams.init(gen, hidden, k) for k in range(layers)]

    def parameters(self) -> list[T.Tensor]:
        out = [self.lift, self.lift_b, self.q0, self.edge_w, self.edge_b]
        for layer in self.layers:
            out += layer.parameters()
        return out

    def lift_samples(self, h: T.Tensor) -> T.Tensor:
        return T.add_bias(h @ self.lift, self.lift_b)

    def initial(self, g: BipartiteGraph, p0: T.Tensor, edge_values: T.Tensor) -> GraphEmbeddings:
        e0 = T.add_bias(T.reshape(edge_values, (g.n_edges, 1)) @ self.edge_w, self.edge_b)
        return GraphEmbeddings(p0, self.q0, e0, 0)

    def __call__(self, g: BipartiteGraph, p0: T.Tensor, edge_values: T.Tensor) -> GraphEmbeddings:
        emb = self.initial(g, p0, edge_values)
        for params in self.layers:
            emb = message_pass_layer(g, emb, params)
        return emb


def edge_values(h: T.Tensor, g: BipartiteGraph) -> T.Tensor:
    """Gather the scalar of every edge from the n x p feature tensor."""
    flat = T.reshape(h, (h.shape[0] * h.shape[1],))
    return T.gather_rows(flat, g.rows * h.shape[1] + g.cols)
