"""Training loop, edge-wise imputation head, graph refinement and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .dataio import Dataset, Imputation, denormalize_values, normalize
from .errors import ContractError, TrainingDivergedError
from .graph import BipartiteGraph, GraphEncoder, build_graph, edge_dropout, edge_values
from .hetembed import (
    CategoryEmbedding,
    OneHotLayout,
    continuous_block,
    embed_categorical,
    feature_order,
    glorot,
    integrate,
    one_hot_encode,
    zeros,
)
from .missingness import MaskMatrix
from .rng import rng
from .vgae import (
    ElboTerms,
    FeatureDecoder,
    GaussianLatent,
    GCNEncoder,
    SampleAdjacency,
    decode_features,
    elbo,
    gcn_encode,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("epoch", "l_imp", "recon", "kl", "total", "held_out", "fallbacks")


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x**2))) if x.size else 0.0


class ImputationHead:
    """Two-layer feed-forward map from [p_hat_i, q_j] to one raw score."""

    def __init__(self, in_dim: int, hidden: int, gen: np.random.Generator):
        self.w1 = glorot(gen, in_dim, hidden, "head.w1")
        self.b1 = zeros(hidden, "head.b1")
        self.w2 = glorot(gen, hidden, 1, "head.w2")
        self.b2 = zeros(1, "head.b2")

    def parameters(self) -> list[T.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, p_hat: T.Tensor, q: T.Tensor, rows: np.ndarray, nodes: np.ndarray) -> T.Tensor:
        d = p_hat.shape[1]
        # [p_i, q_j] @ w1 computed per node, then gathered per edge
        top = T.slice_rows(self.w1, 0, d)
        bottom = T.slice_rows(self.w1, d, self.w1.shape[0])
        pre = T.gather_rows(p_hat @ top, rows) + T.gather_rows(q @ bottom, nodes)
        hidden = T.relu(T.add_bias(pre, self.b1))
        out = T.add_bias(hidden @ self.w2, self.b2)
        return T.reshape(out, (len(rows),))


def impute_edge(p_hat: T.Tensor, q: T.Tensor, head: ImputationHead, rows, nodes, kind: str) -> T.Tensor:
    """Predicted values for (sample, feature-node) pairs.

    kind: ``continuous`` -> sigmoid score; ``embedding`` -> raw score (hetero
    categorical); ``logits`` -> raw scores to be grouped into a softmax.
    """
    raw = head(p_hat, q, np.asarray(rows), np.asarray(nodes))
    if kind == "continuous":
        return T.sigmoid(raw)
    if kind in ("embedding", "logits"):
        return raw
    raise ContractError(f"unknown column kind {kind!r}")


class LossCounter:
    empty_held_out = 0


def mse(pred: T.Tensor, truth: np.ndarray) -> T.Tensor:
    diff = pred - T.Tensor(np.asarray(truth, dtype=np.float64))
    return T.mean(T.mul(diff, diff))


def cross_entropy(logits: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """Mean CE of row-wise softmax(logits) against integer labels."""
    logp = T.log_softmax_rows(logits)
    k, c = logits.shape
    picked = T.gather_rows(T.reshape(logp, (k * c,)), np.arange(k) * c + np.asarray(truth, dtype=np.int64))
    return T.scale(T.mean(picked), -1.0)


def imputation_loss(
    cont_pred: T.Tensor | None,
    cont_truth: np.ndarray | None,
    cat_pred,
    cat_truth,
    mode: str = "hetero",
) -> T.Tensor:
    """Loss over the held-out cells of one epoch.

    hetero: one MSE over every held-out cell; categorical truths are the
    (constant) scalar embeddings of the true categories and ``cat_pred`` is
    the raw score tensor.
    onehot: MSE over continuous cells plus mean CE over categorical cells;
    ``cat_pred`` / ``cat_truth`` are parallel lists of (k x C logits, labels).
    """
    has_cont = cont_pred is not None and cont_pred.size > 0
    if mode == "hetero":
        has_cat = cat_pred is not None and cat_pred.size > 0
        if not has_cont and not has_cat:
            LossCounter.empty_held_out += 1
            logger.warning("empty held-out set; imputation loss is zero")
            return T.Tensor(0.0)
        parts, truths = [], []
        if has_cont:
            parts.append(cont_pred)
            truths.append(np.asarray(cont_truth, dtype=np.float64))
        if has_cat:
            parts.append(cat_pred)
            truths.append(np.asarray(cat_truth, dtype=np.float64))
        pred = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        return mse(pred, np.concatenate(truths))
    if mode != "onehot":
        raise ContractError(f"unknown embedding mode {mode!r}")
    terms = []
    if has_cont:
        terms.append(mse(cont_pred, cont_truth))
    cat_pred = [lg for lg in (cat_pred or []) if lg.shape[0] > 0]
    cat_truth = [t for t in (cat_truth or []) if len(t) > 0]
    if cat_pred:
        total = sum(lg.shape[0] for lg in cat_pred)
        ce = None
        for lg, t in zip(cat_pred, cat_truth):
            part = T.scale(cross_entropy(lg, t), lg.shape[0] / total)
            ce = part if ce is None else ce + part
        terms.append(ce)
    if not terms:
        LossCounter.empty_held_out += 1
        logger.warning("empty held-out set; imputation loss is zero")
        return T.Tensor(0.0)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


@dataclass
class Forward:
    h: T.Tensor
    P: T.Tensor
    Q: T.Tensor
    latent: GaussianLatent
    p_hat: T.Tensor
    elbo: ElboTerms
    fallbacks: int


@dataclass
class CellPredictions:
    cont_idx: np.ndarray  # positions (into the queried cells) of continuous cells
    cont: T.Tensor | None
    cat_idx: np.ndarray
    cat: T.Tensor | None  # hetero: raw scalar per categorical cell
    logits: dict  # onehot: column -> (positions, k x C logits)


class IVGAE:
    """Model state: every trainable tensor, the optimiser and the epoch counter.

    The model owns a Min-Max (or z-score) normalised copy of the input; the
    statistics come from observed cells only.
    """

    def __init__(
        self,
        dataset: Dataset,
        mask: MaskMatrix | np.ndarray,
        model_cfg: ModelConfig | None = None,
        train_cfg: TrainConfig | None = None,
    ):
        self.model_cfg = model_cfg or ModelConfig()
        self.train_cfg = train_cfg or TrainConfig()
        m = mask.m if isinstance(mask, MaskMatrix) else np.asarray(mask)
        if m.shape != dataset.cells.shape:
            raise ContractError(f"mask {m.shape} does not match data {dataset.cells.shape}")
        self.raw = dataset
        self.mask = m.astype(np.int8)
        self.data = normalize(dataset, self.train_cfg.normalization, mask=self.mask)
        self.n, self.p = dataset.cells.shape
        self.mode = self.model_cfg.embedding_mode
        mc, seed = self.model_cfg, self.train_cfg.seed
        gen = rng(seed, "init")
        cell_ids = np.arange(self.n)[:, None] * self.p
        if self.mode == "hetero":
            self.embedding = CategoryEmbedding(self.data, gen, mc.d_tok, mc.att_layers)
            self.order = np.array(feature_order(self.data), dtype=np.int64)
            self.node_of = np.empty(self.p, dtype=np.int64)
            self.node_of[self.order] = np.arange(self.p)
            observed = self.mask[:, self.order] == 1
            self.base_graph = build_graph(
                np.zeros((self.n, self.p)), observed, cell_ids + self.order[None, :]
            )
            in_dim = n_nodes = self.p
        else:
            self.embedding = None
            self.layout = OneHotLayout.from_dataset(self.data)
            x, observed, _ = one_hot_encode(self.data, self.mask)
            slot_obs = self.mask[:, self.layout.slot_column] == 1
            self.base_graph = build_graph(x, slot_obs, cell_ids + self.layout.slot_column[None, :])
            self.cont_slot = {j: s for s, j in enumerate(self.data.continuous_idx)}
            in_dim = n_nodes = self.layout.width
        self.encoder = GraphEncoder(in_dim, n_nodes, gen, mc.hidden, mc.encoder_layers)
        if mc.adj_init == "knn":
            self.adjacency = SampleAdjacency.from_knn(
                self._mean_filled(), rng(seed, "adjacency"), k=10
            )
        else:
            self.adjacency = SampleAdjacency.random(self.n, rng(seed, "adjacency"))
        self.gcn = GCNEncoder(mc.hidden, gen, mc.hidden, mc.latent)
        self.decoder = FeatureDecoder(mc.hidden, mc.latent, gen, mc.hidden)
        self.head = ImputationHead(2 * mc.hidden, mc.head_hidden, gen)
        self.optimizer = T.Adam(self.parameters(), lr=self.train_cfg.lr)
        self.epoch = 0
        self.refined: np.ndarray | None = None
        self.history: list[dict] = []

    # ------------------------------------------------------------ structure

    def parameters(self) -> list[T.Tensor]:
        out = []
        if self.embedding is not None:
            out += self.embedding.parameters()
        out += self.encoder.parameters()
        out += self.adjacency.parameters()
        out += self.gcn.parameters()
        out += self.decoder.parameters()
        out += self.head.parameters()
        return out

    def named_parameters(self) -> dict[str, T.Tensor]:
        params = self.parameters()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        return dict(zip(names, params))

    def _mean_filled(self) -> np.ndarray:
        x = self.data.cells.copy()
        cont = self.data.continuous_idx
        x[:, cont] = continuous_block(self.data, self.mask)
        for j in self.data.categorical_idx:
            col = self.data.schema[j]
            x[:, j] = x[:, j] / max(col.n_categories - 1, 1)
        return x

    def features(self, in_mask: np.ndarray) -> T.Tensor:
        if self.mode == "hetero":
            h_cat = embed_categorical(self.data, in_mask, self.embedding)
            return integrate(h_cat, self.data, in_mask)
        x, _, _ = one_hot_encode(self.data, in_mask)
        return T.Tensor(x)

    def sample_inputs(self, h: T.Tensor) -> T.Tensor:
        p0 = self.encoder.lift_samples(h)
        alpha = self.train_cfg.refine_alpha
        if self.refined is not None and alpha < 1.0:
            # capped at the lifted inputs' RMS; the factor carries no gradient
            cap, have = _rms(p0.data), _rms(self.refined)
            fed = self.refined * (cap / have) if have > cap else self.refined
            p0 = T.scale(p0, alpha) + T.Tensor((1.0 - alpha) * fed)
        return p0

    # ------------------------------------------------------------ forward

    def forward(self, graph: BipartiteGraph, in_mask: np.ndarray, eps: np.ndarray | None, kl_weight: float = 1.0) -> Forward:
        h = self.features(in_mask)
        emb = self.encoder(graph, self.sample_inputs(h), edge_values(h, graph))
        adj_w = self.adjacency.weights()
        adj_norm = T.sym_normalize(adj_w)
        latent = gcn_encode(emb.P, adj_norm, self.gcn, eps)
        p_hat = decode_features(latent.z, adj_norm, emb.P, self.decoder)
        terms = elbo(latent, adj_w.data, kl_weight=kl_weight)
        return Forward(h, emb.P, emb.Q, latent, p_hat, terms, emb.fallbacks)

    def predict(self, fw: Forward, rows: np.ndarray, cols: np.ndarray) -> CellPredictions:
        """Head outputs for cells (rows[k], cols[k]) in original column numbering."""
        rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
        is_cat = np.array([self.data.schema[j].is_categorical for j in cols], dtype=bool)
        cont_idx, cat_idx = np.flatnonzero(~is_cat), np.flatnonzero(is_cat)
        cont = cat = None
        logits = {}
        if self.mode == "hetero":
            if cont_idx.size:
                cont = impute_edge(fw.p_hat, fw.Q, self.head, rows[cont_idx], self.node_of[cols[cont_idx]], "continuous")
            if cat_idx.size:
                cat = impute_edge(fw.p_hat, fw.Q, self.head, rows[cat_idx], self.node_of[cols[cat_idx]], "embedding")
        else:
            if cont_idx.size:
                slots = np.array([self.cont_slot[j] for j in cols[cont_idx]], dtype=np.int64)
                cont = impute_edge(fw.p_hat, fw.Q, self.head, rows[cont_idx], slots, "continuous")
            for j in np.unique(cols[cat_idx]):
                pos = cat_idx[cols[cat_idx] == j]
                slots = self.layout.groups[int(j)]
                k, c = pos.size, slots.size
                raw = impute_edge(fw.p_hat, fw.Q, self.head, np.repeat(rows[pos], c), np.tile(slots, k), "logits")
                logits[int(j)] = (pos, T.reshape(raw, (k, c)))
        return CellPredictions(cont_idx, cont, cat_idx, cat, logits)

    def cell_loss(self, fw: Forward, rows: np.ndarray, cols: np.ndarray) -> T.Tensor:
        preds = self.predict(fw, rows, cols)
        truth = self.data.cells[rows, cols]
        cont_truth = truth[preds.cont_idx]
        if self.mode == "hetero":
            cat_truth = None
            if preds.cat_idx.size:
                cat_truth = self._embedding_targets(rows[preds.cat_idx], cols[preds.cat_idx])
            return imputation_loss(preds.cont, cont_truth, preds.cat, cat_truth, "hetero")
        cat_pred = [lg for _, lg in preds.logits.values()]
        cat_truth = [truth[pos].astype(np.int64) for pos, _ in preds.logits.values()]
        return imputation_loss(preds.cont, cont_truth, cat_pred, cat_truth, "onehot")

    def _embedding_targets(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Detached scalar embedding of each cell's true category."""
        k_of = np.full(self.p, -1, dtype=np.int64)
        k_of[self.data.categorical_idx] = np.arange(len(self.data.categorical_idx))
        codes = self.data.cells[rows, cols].astype(np.int64)
        return self.embedding.table.data[self.embedding.offsets[k_of[cols]] + codes].copy()

    # ------------------------------------------------------------ training

    def kl_weight(self) -> float:
        if not self.train_cfg.kl_warmup:
            return 1.0
        ramp = max(1, int(0.1 * self.train_cfg.epochs))
        return min(1.0, (self.epoch + 1) / ramp)

    def train_epoch(self) -> dict:
        cfg = self.train_cfg
        T.active_tape().reset()
        train_g, held_g = edge_dropout(self.base_graph, cfg.edge_dropout, cfg.seed, self.epoch)
        held = np.unique(held_g.cells)
        rows, cols = held // self.p, held % self.p
        in_mask = self.mask.copy()
        in_mask[rows, cols] = 0
        eps = rng(cfg.seed, "reparam", self.epoch).standard_normal((self.n, self.model_cfg.latent))
        fw = self.forward(train_g, in_mask, eps, self.kl_weight())
        l_imp = self.cell_loss(fw, rows, cols)
        vgae_loss = fw.elbo.loss
        total = l_imp if cfg.beta == 0 else l_imp + T.scale(vgae_loss, cfg.beta)
        metrics = {
            "epoch": self.epoch + 1,
            "l_imp": l_imp.item(),
            "recon": fw.elbo.recon.item(),
            "kl": fw.elbo.kl.item(),
            "total": total.item(),
            "held_out": int(held.size),
            "fallbacks": int(fw.fallbacks),
        }
        if not np.isfinite(metrics["total"]):
            T.active_tape().reset()
            raise TrainingDivergedError(
                f"non-finite loss at epoch {metrics['epoch']}", {**metrics, "max_abs_grad": None}
            )
        self.optimizer.zero_grad()
        T.backward(total)
        grad_max = max((float(np.abs(p.grad).max()) for p in self.optimizer.params if p.grad is not None), default=0.0)
        if not np.isfinite(grad_max):
            raise TrainingDivergedError(
                f"non-finite gradient at epoch {metrics['epoch']}", {**metrics, "max_abs_grad": grad_max}
            )
        self.optimizer.step()
        self.epoch += 1
        if cfg.refine_every and self.epoch % cfg.refine_every == 0:
            self.refine_graph(fw.p_hat.data)
        self.history.append(metrics)
        return metrics

    def refine_graph(self, p_hat: np.ndarray) -> None:
        """Blend reconstructed sample embeddings into the layer-0 sample inputs.

        The blend caps their RMS at that of the lifted inputs (see
        ``sample_inputs``): left unbounded, their scale compounds from one
        refinement to the next until the head's ReLUs die.
        The observed edge set is never touched.
        """
        self.refined = np.array(p_hat, dtype=np.float64)

    def fit(
        self,
        epochs: int | None = None,
        log_path: str | Path | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        epochs = self.train_cfg.epochs if epochs is None else epochs
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
        try:
            out = []
            for _ in range(epochs):
                metrics = self.train_epoch()
                out.append(metrics)
                if writer is not None:
                    writer.writerow(metrics)
                if callback is not None:
                    callback(metrics)
            return out
        finally:
            if fh is not None:
                fh.close()

    # ------------------------------------------------------------ imputation

    def impute(self) -> Imputation:
        """Fill every masked cell; observed cells are copied from the input verbatim."""
        rows, cols = np.nonzero(self.mask == 0)
        cells = np.array(self.raw.cells, dtype=np.float64)
        proba: dict[int, np.ndarray] = {}
        embedding: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        if rows.size == 0:
            return Imputation(self.raw.with_cells(cells))
        with T.no_grad():
            fw = self.forward(self.base_graph, self.mask, eps=None)
            preds = self.predict(fw, rows, cols)
        if preds.cont is not None:
            for k, value in zip(preds.cont_idx, preds.cont.data):
                col = self.data.schema[cols[k]]
                cells[rows[k], cols[k]] = denormalize_values(col, np.array([value]))[0]
        if self.mode == "hetero" and preds.cat is not None:
            k_of = {j: k for k, j in enumerate(self.data.categorical_idx)}
            for j in np.unique(cols[preds.cat_idx]):
                pos = preds.cat_idx[cols[preds.cat_idx] == j]
                scores = preds.cat.data[np.isin(preds.cat_idx, pos)]
                values = self.embedding.category_values(k_of[int(j)])
                # nearest category scalar; argmin keeps the lowest index on ties
                choice = np.argmin(np.abs(scores[:, None] - values[None, :]), axis=1)
                cells[rows[pos], j] = choice
                pred = np.full(self.n, np.nan)
                pred[rows[pos]] = scores
                embedding[int(j)] = (pred, values)
        else:
            for j, (pos, lg) in preds.logits.items():
                probs = T.softmax_rows(lg).data
                cells[rows[pos], j] = np.argmax(probs, axis=1)
                full = np.zeros((self.n, self.data.schema[j].n_categories))
                obs = self.mask[:, j] == 1
                full[obs, self.data.cells[obs, j].astype(np.int64)] = 1.0
                full[rows[pos]] = probs
                proba[j] = full
        return Imputation(self.raw.with_cells(cells), proba, embedding)

    def fill(self) -> Dataset:
        return self.impute().dataset

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> None:
        """Write a versioned ``.npz`` container; see README for the layout."""
        params = self.named_parameters()
        arrays = {}
        for k, (name, p) in enumerate(params.items()):
            arrays[f"param/{name}"] = p.data
            arrays[f"adam_m/{name}"] = self.optimizer.m[k]
            arrays[f"adam_v/{name}"] = self.optimizer.v[k]
        if self.refined is not None:
            arrays["state/refined"] = self.refined
        meta = {
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "adam_t": self.optimizer.t,
            "rng": {"seed": self.train_cfg.seed, "streams": ["init", "adjacency", "dropout", "reparam"], "next_index": self.epoch},
            "model": asdict(self.model_cfg),
            "train": asdict(self.train_cfg),
            "n": self.n,
            "p": self.p,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path, dataset: Dataset, mask) -> IVGAE:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(dataset, mask, ModelConfig(**meta["model"]), TrainConfig(**meta["train"]))
            for k, (name, p) in enumerate(model.named_parameters().items()):
                p.data[...] = z[f"param/{name}"]
                model.optimizer.m[k][...] = z[f"adam_m/{name}"]
                model.optimizer.v[k][...] = z[f"adam_v/{name}"]
            model.refined = np.array(z["state/refined"]) if "state/refined" in z.files else None
        model.epoch = meta["epoch"]
        model.optimizer.t = meta["adam_t"]
        return model


def fit_impute(
    dataset: Dataset,
    mask,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    log_path: str | Path | None = None,
) -> tuple[IVGAE, Imputation]:
    model = IVGAE(dataset, mask, model_cfg, train_cfg)
    model.fit(log_path=log_path)
    return model, model.impute()
