"""Finite-difference checks for every differentiable operation and the composite losses."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckRow:
    name: str
    kind: str  # primitive | composite
    max_rel_err: float
    tol: float
    passed: bool
    seconds: float


def _weighted_sum(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum(T.mul(out, T.Tensor(w)))


def _away_from(x: np.ndarray, points, margin: float = 0.05) -> np.ndarray:
    """Nudge entries that sit within ``margin`` of a kink."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def _primitive_cases(gen: np.random.Generator) -> dict[str, tuple[Callable[[], T.Tensor], list[T.Tensor]]]:
    def par(*shape, lo=-1.0, hi=1.0, kinks=()):
        data = gen.uniform(lo, hi, size=shape)
        return T.parameter(_away_from(data, kinks) if kinks else data)

    def w(shape):
        return gen.normal(size=shape)

    cases = {}
    a, b = par(3, 4), par(3, 4)
    wa = w((3, 4))
    cases["add"] = (lambda: _weighted_sum(T.add(a, b), wa), [a, b])
    cases["sub"] = (lambda: _weighted_sum(T.sub(a, b), wa), [a, b])
    cases["mul"] = (lambda: _weighted_sum(T.mul(a, b), wa), [a, b])
    s = T.parameter(np.array(0.7))
    cases["add_scalar"] = (lambda: _weighted_sum(T.add(a, s), wa), [a, s])
    cases["scale"] = (lambda: _weighted_sum(T.scale(a, -2.5), wa), [a])
    r = par(3, 4, kinks=(0.0,))
    cases["relu"] = (lambda: _weighted_sum(T.relu(r), wa), [r])
    x = par(3, 4, lo=-4, hi=4)
    cases["sigmoid"] = (lambda: _weighted_sum(T.sigmoid(x), wa), [x])
    cases["exp"] = (lambda: _weighted_sum(T.exp(x), wa), [x])
    pos = par(3, 4, lo=0.2, hi=3.0)
    cases["log"] = (lambda: _weighted_sum(T.log(pos), wa), [pos])
    cases["log_sigmoid"] = (lambda: _weighted_sum(T.log_sigmoid(x), wa), [x])
    c = par(3, 4, lo=-3, hi=3, kinks=(-1.0, 1.0))
    cases["clamp"] = (lambda: _weighted_sum(T.clamp(c, -1.0, 1.0), wa), [c])
    target = gen.uniform(0, 1, size=(3, 4))
    cases["bce_with_logits"] = (lambda: T.sum(T.bce_with_logits(x, target, 2.5)), [x])
    _w1 = w(4)
    cases["sum"] = (lambda: T.sum(T.mul(T.sum(a, axis=0), T.Tensor(_w1))), [a])
    _w2 = w(3)
    cases["mean"] = (lambda: T.sum(T.mul(T.mean(a, axis=1), T.Tensor(_w2))), [a])
    m1, m2 = par(3, 5), par(5, 2)
    w32 = w((3, 2))
    cases["matmul"] = (lambda: _weighted_sum(T.matmul(m1, m2), w32), [m1, m2])
    bt = par(2, 3, 5)
    wb = w((2, 3, 2))
    cases["matmul_batched"] = (lambda: _weighted_sum(T.matmul(bt, m2), wb), [bt, m2])
    b2 = par(2, 5, 4)
    wbb = w((2, 3, 4))
    cases["matmul_batched_pair"] = (lambda: _weighted_sum(T.matmul(bt, b2), wbb), [bt, b2])
    _w3 = w((4, 3))
    cases["transpose"] = (lambda: _weighted_sum(T.transpose(a), _w3), [a])
    _w4 = w((2, 6))
    cases["reshape"] = (lambda: _weighted_sum(T.reshape(a, (2, 6)), _w4), [a])
    c2 = par(3, 2)
    _w5 = w((3, 6))
    cases["concat"] = (lambda: _weighted_sum(T.concat([a, c2], axis=1), _w5), [a, c2])
    idx = np.array([0, 2, 2, 1, 0, 2])
    _w6 = w((6, 4))
    cases["gather_rows"] = (lambda: _weighted_sum(T.gather_rows(a, idx), _w6), [a])
    _w7 = w((2, 4))
    cases["slice_rows"] = (lambda: _weighted_sum(T.slice_rows(a, 1, 3), _w7), [a])
    e = par(7, 3)
    seg = np.array([0, 0, 2, 2, 2, 3, 0])
    we = w((5, 3))
    cases["segment_mean"] = (lambda: _weighted_sum(T.segment_mean(e, seg, 5)[0], we), [e])
    bias = par(4)
    cases["add_bias"] = (lambda: _weighted_sum(T.add_bias(a, bias), wa), [a, bias])
    cases["softmax_rows"] = (lambda: _weighted_sum(T.softmax_rows(x), wa), [x])
    cases["log_softmax_rows"] = (lambda: _weighted_sum(T.log_softmax_rows(x), wa), [x])
    adj = par(5, 5, lo=0.0, hi=1.0)
    _w8 = w((5, 5))
    cases["sym_normalize"] = (lambda: _weighted_sum(T.sym_normalize(adj), _w8), [adj])
    return cases


def _composite_imputation(mode: str):
    """L_imp of a small model on a mixed-type table, with the held-out targets frozen."""
    from .config import ModelConfig, TrainConfig
    from .graph import edge_dropout
    from .missingness import gen_mcar
    from .rng import rng
    from .synth import mixed_type
    from .trainer import IVGAE, imputation_loss

    data = mixed_type(16, n_continuous=3, n_categorical=2, n_categories=3, seed=3)
    mask = gen_mcar(data, 0.2, seed=3)
    model = IVGAE(
        data, mask,
        ModelConfig(embedding_mode=mode, d_tok=4, hidden=6, latent=3, head_hidden=5, encoder_layers=2),
        TrainConfig(epochs=1, seed=3),
    )
    train_g, held_g = edge_dropout(model.base_graph, 0.3, 3, 0)
    held = np.unique(held_g.cells)
    rows, cols = held // model.p, held % model.p
    in_mask = model.mask.copy()
    in_mask[rows, cols] = 0
    eps = rng(3, "reparam", 0).standard_normal((model.n, 3))
    truth = model.data.cells[rows, cols]
    with T.no_grad():
        probe = model.predict(model.forward(train_g, in_mask, eps), rows, cols)
    cont_truth = truth[probe.cont_idx]
    if mode == "hetero":
        frozen = model._embedding_targets(rows[probe.cat_idx], cols[probe.cat_idx]) if probe.cat_idx.size else None
    else:
        frozen = [truth[pos].astype(np.int64) for pos, _ in probe.logits.values()]

    def f():
        preds = model.predict(model.forward(train_g, in_mask, eps), rows, cols)
        if mode == "hetero":
            return imputation_loss(preds.cont, cont_truth, preds.cat, frozen, "hetero")
        return imputation_loss(preds.cont, cont_truth, [lg for _, lg in preds.logits.values()], frozen, "onehot")

    return f, model.parameters()


def _composite_elbo():
    """Negated ELBO on a 6-node sample graph; the adjacency target is frozen at its initial value."""
    from .rng import rng
    from .vgae import GCNEncoder, SampleAdjacency, elbo, gcn_encode

    gen = rng(11, "gradcheck")
    adj = SampleAdjacency.random(6, gen, std=0.5)
    P = T.parameter(gen.normal(size=(6, 4)), "P")
    enc = GCNEncoder(4, gen, hidden=5, latent=3)
    eps = gen.standard_normal((6, 3))
    target = adj.weights().data.copy()
    T.active_tape().reset()

    def f():
        latent = gcn_encode(P, adj.normalized(), enc, eps)
        return elbo(latent, target).loss

    return f, [P, *adj.parameters(), *enc.parameters()]


def run_all(seed: int = 0, max_elems: int = 24) -> list[CheckRow]:
    """Run every check; primitives at 1e-4, composites at 1e-3."""
    rows = []
    gen = np.random.default_rng(seed)
    for name, (f, params) in _primitive_cases(gen).items():
        start = time.perf_counter()
        report = T.grad_check(f, params, step=1e-5, tol=PRIMITIVE_TOL, max_elems=max_elems, seed=seed)
        rows.append(CheckRow(name, "primitive", report.max_rel_err, PRIMITIVE_TOL, report.passed, time.perf_counter() - start))
    composites = {
        "L_imp[hetero]": lambda: _composite_imputation("hetero"),
        "L_imp[onehot]": lambda: _composite_imputation("onehot"),
        "elbo[6 nodes]": _composite_elbo,
    }
    for name, build in composites.items():
        start = time.perf_counter()
        f, params = build()
        report = T.grad_check(f, params, step=1e-5, tol=COMPOSITE_TOL, max_elems=max_elems, seed=seed)
        rows.append(CheckRow(name, "composite", report.max_rel_err, COMPOSITE_TOL, report.passed, time.perf_counter() - start))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'kind':<9}  {'max_rel_err':>11}  {'tol':>7}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.kind:<9}  {r.max_rel_err:11.3e}  {r.tol:7.0e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
