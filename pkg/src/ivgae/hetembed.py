"""Per-sample feature vectors for mixed categorical/continuous tables.

Heterogeneous mode maps each categorical cell to a learnable scalar (one
extra "missing" scalar per column), lets the categorical tokens of a sample
attend to each other, reads one scalar back per token, and appends the
normalised continuous values.  The result has exactly one slot per column.

One-hot mode is the classical alternative that expands a categorical
column with C categories into C binary slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataio import Dataset
from .errors import ContractError, SchemaError


def glorot(gen: np.random.Generator, fan_in: int, fan_out: int, name: str) -> T.Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(gen.uniform(-bound, bound, size=(fan_in, fan_out)), name)


def zeros(shape, name: str) -> T.Tensor:
    return T.parameter(np.zeros(shape), name)


@dataclass
class AttentionLayer:
    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    ff1: T.Tensor
    b1: T.Tensor
    ff2: T.Tensor
    b2: T.Tensor

    @classmethod
    def init(cls, gen, d: int, k: int) -> AttentionLayer:
        return cls(
            glorot(gen, d, d, f"att{k}.wq"),
            glorot(gen, d, d, f"att{k}.wk"),
            glorot(gen, d, d, f"att{k}.wv"),
            glorot(gen, d, d, f"att{k}.wo"),
            glorot(gen, d, 2 * d, f"att{k}.ff1"),
            zeros(2 * d, f"att{k}.b1"),
            glorot(gen, 2 * d, d, f"att{k}.ff2"),
            zeros(d, f"att{k}.b2"),
        )

    def parameters(self) -> list[T.Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.ff1, self.b1, self.ff2, self.b2]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        # x: (n, tokens, d); attention runs across the tokens of one sample
        d = x.shape[-1]
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        att = T.softmax_rows(T.scale(q @ T.transpose(k), 1.0 / np.sqrt(d)))
        x = x + (att @ v) @ self.wo
        ff = T.add_bias(T.relu(T.add_bias(x @ self.ff1, self.b1)) @ self.ff2, self.b2)
        return x + ff


class CategoryEmbedding:
    """Scalar embedding table plus the attention refiner."""

    def __init__(self, dataset: Dataset, gen: np.random.Generator, d_tok: int = 16, layers: int = 1):
        self.columns = dataset.categorical_idx
        self.sizes = [dataset.schema[j].n_categories for j in self.columns]
        self.offsets = np.concatenate([[0], np.cumsum([c + 1 for c in self.sizes])]).astype(np.int64)
        self.table = T.parameter(gen.uniform(-0.5, 0.5, size=int(self.offsets[-1])), "emb.table")
        self.d_tok = d_tok
        self.layers = [AttentionLayer.init(gen, d_tok, k) for k in range(layers)] if self.columns else []
        if self.layers:
            self.lift_w = glorot(gen, 1, d_tok, "emb.lift_w")
            self.lift_b = zeros(d_tok, "emb.lift_b")
            self.read_w = glorot(gen, d_tok, 1, "emb.read_w")
            self.read_b = zeros(1, "emb.read_b")

    def parameters(self) -> list[T.Tensor]:
        out = [self.table] if self.columns else []
        if self.layers:
            out += [self.lift_w, self.lift_b, self.read_w, self.read_b]
            for layer in self.layers:
                out += layer.parameters()
        return out

    def slot_index(self, codes: np.ndarray, observed: np.ndarray) -> np.ndarray:
        """Flat table index per cell: the category's slot, or the missing token."""
        codes = np.asarray(codes, dtype=np.int64)
        if codes.shape[1] != len(self.columns):
            raise ContractError(f"expected {len(self.columns)} categorical columns, got {codes.shape[1]}")
        sizes = np.asarray(self.sizes)
        if np.any(codes[observed] < 0) or np.any((codes >= sizes[None, :]) & observed):
            raise SchemaError("category index outside the embedding table (schema drift)")
        slot = np.where(observed, codes, sizes[None, :])
        return self.offsets[:-1][None, :] + slot

    def category_values(self, k: int) -> np.ndarray:
        """Current scalar embedding of every category of the k-th categorical column."""
        lo = self.offsets[k]
        return self.table.data[lo : lo + self.sizes[k]].copy()

    def target_index(self, k: int, codes: np.ndarray) -> np.ndarray:
        return self.offsets[k] + np.asarray(codes, dtype=np.int64)

    def __call__(self, codes: np.ndarray, observed: np.ndarray) -> T.Tensor:
        n = codes.shape[0]
        if not self.columns:
            return T.Tensor(np.zeros((n, 0)))
        scalars = T.gather_rows(self.table, self.slot_index(codes, observed))
        if not self.layers:
            return scalars
        c = len(self.columns)
        tokens = T.add_bias(T.reshape(scalars, (n * c, 1)) @ self.lift_w, self.lift_b)
        x = T.reshape(tokens, (n, c, self.d_tok))
        for layer in self.layers:
            x = layer(x)
        out = T.add_bias(T.reshape(x, (n * c, self.d_tok)) @ self.read_w, self.read_b)
        return T.reshape(out, (n, c))


def embed_categorical(d: Dataset, mask: np.ndarray, embedding: CategoryEmbedding) -> T.Tensor:
    cols = d.categorical_idx
    codes = d.cells[:, cols].astype(np.int64)
    observed = np.asarray(mask)[:, cols] == 1
    return embedding(codes, observed)


def continuous_block(d: Dataset, mask: np.ndarray) -> np.ndarray:
    """Continuous columns with masked cells replaced by the observed column mean."""
    cols = d.continuous_idx
    x = d.cells[:, cols].copy()
    obs = np.asarray(mask)[:, cols] == 1
    for k in range(len(cols)):
        col_obs = x[obs[:, k], k]
        fill = col_obs.mean() if col_obs.size else 0.0
        x[~obs[:, k], k] = fill
    return x


def feature_order(d: Dataset) -> list[int]:
    """Column order of h_i: categorical block, then continuous block."""
    return d.categorical_idx + d.continuous_idx


def integrate(h_cat: T.Tensor, d: Dataset, mask: np.ndarray) -> T.Tensor:
    cont = continuous_block(d, mask)
    if h_cat.shape[0] != d.n or h_cat.shape[1] != len(d.categorical_idx):
        raise ContractError(f"h_cat shape {h_cat.shape} does not match dataset {d.n}x{len(d.categorical_idx)}")
    if h_cat.shape[1] == 0:
        return T.Tensor(cont)
    if cont.shape[1] == 0:
        return h_cat
    return T.concat([h_cat, T.Tensor(cont)], axis=1)


@dataclass
class OneHotLayout:
    """Expanded column layout: continuous slots first, then C slots per categorical column."""

    width: int
    slot_column: np.ndarray  # expanded slot -> original column
    slot_category: np.ndarray  # -1 for continuous slots
    groups: dict[int, np.ndarray]  # categorical column -> its expanded slots
    names: list[str]

    @classmethod
    def from_dataset(cls, d: Dataset) -> OneHotLayout:
        slot_column, slot_category, names, groups = [], [], [], {}
        for j in d.continuous_idx:
            slot_column.append(j)
            slot_category.append(-1)
            names.append(d.schema[j].name)
        for j in d.categorical_idx:
            col = d.schema[j]
            start = len(slot_column)
            for c, label in enumerate(col.categories):
                slot_column.append(j)
                slot_category.append(c)
                names.append(f"{col.name}={label}")
            groups[j] = np.arange(start, len(slot_column))
        return cls(len(slot_column), np.array(slot_column), np.array(slot_category), groups, names)


def one_hot_encode(d: Dataset, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, OneHotLayout]:
    """Return (values, observed flags, layout) for the expanded table.

    Masked categorical cells expand to all-zero slots flagged missing; masked
    continuous cells carry the observed column mean and are flagged missing.
    """
    mask = np.asarray(mask)
    layout = OneHotLayout.from_dataset(d)
    out = np.zeros((d.n, layout.width))
    observed = np.zeros((d.n, layout.width), dtype=bool)
    cont = continuous_block(d, mask)
    nc = len(d.continuous_idx)
    out[:, :nc] = cont
    observed[:, :nc] = mask[:, d.continuous_idx] == 1
    for j, slots in layout.groups.items():
        obs = mask[:, j] == 1
        codes = d.cells[:, j].astype(np.int64)
        rows = np.flatnonzero(obs)
        out[rows, slots[codes[rows]]] = 1.0
        observed[:, slots] = obs[:, None]
    return out, observed, layout


def hetero_width(d: Dataset) -> int:
    return d.p


def onehot_width(d: Dataset) -> int:
    return len(d.continuous_idx) + sum(d.schema[j].n_categories for j in d.categorical_idx)
