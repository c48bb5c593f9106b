"""Tabular dataset loading, schema inference and normalisation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateColumnError, EmptyColumnError, LoadError, SchemaError

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
DEFAULT_CATEGORICAL_THRESHOLD = 10


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    categories: tuple[str, ...] = ()
    # (min, max) under minmax, (mean, std) under zscore
    norm: tuple[float, float] | None = None
    norm_mode: str | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(self.categories) < 2:
                raise SchemaError(
                    f"column {self.name!r}: categorical columns need >= 2 categories, "
                    f"got {list(self.categories)}"
                )
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: duplicate category labels")
        if self.norm is not None and self.norm_mode == "minmax" and self.norm[0] > self.norm[1]:
            raise SchemaError(f"column {self.name!r}: min > max in norm params")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            out["categories"] = list(self.categories)
        return out


@dataclass(frozen=True)
class Dataset:
    """n x p table; categorical cells hold category indices stored as floats."""

    schema: tuple[ColumnSchema, ...]
    cells: np.ndarray
    normalized: str | None = None

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[1] != len(self.schema):
            raise SchemaError(f"cells shape {cells.shape} does not match {len(self.schema)} columns")
        for j, col in enumerate(self.schema):
            if col.is_categorical:
                c = cells[:, j]
                if np.any(c < 0) or np.any(c >= col.n_categories) or np.any(c != np.round(c)):
                    raise SchemaError(f"column {col.name!r}: category index out of range")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "schema", tuple(self.schema))

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def p(self) -> int:
        return self.cells.shape[1]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    @property
    def categorical_idx(self) -> list[int]:
        return [j for j, c in enumerate(self.schema) if c.is_categorical]

    @property
    def continuous_idx(self) -> list[int]:
        return [j for j, c in enumerate(self.schema) if not c.is_categorical]

    def with_cells(self, cells: np.ndarray) -> Dataset:
        return replace(self, cells=np.array(cells, dtype=np.float64))


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _sorted_labels(values: Sequence[str]) -> tuple[str, ...]:
    uniq = set(values)
    if all(_is_number(v) for v in uniq):
        return tuple(sorted(uniq, key=lambda v: (float(v), v)))
    return tuple(sorted(uniq))


def load_schema(path: str | Path) -> list[dict]:
    with open(path) as fh:
        spec = json.load(fh)
    if not isinstance(spec, list):
        raise SchemaError(f"{path}: schema file must hold a JSON list of column specs")
    return spec


def from_frame(
    frame: pd.DataFrame,
    schema_spec: Sequence[dict] | None = None,
    threshold: int = DEFAULT_CATEGORICAL_THRESHOLD,
) -> Dataset:
    """Type the string-valued ``frame`` into a :class:`Dataset`.

    A column is categorical if it is declared so, or (without a declaration)
    if it is non-numeric or has at most ``threshold`` distinct values.
    """
    declared = {s["name"]: s for s in (schema_spec or [])}
    unknown = set(declared) - set(frame.columns)
    if unknown:
        raise SchemaError(f"schema names columns missing from the data: {sorted(unknown)}")
    columns, cells = [], np.empty((len(frame), frame.shape[1]))
    for j, name in enumerate(frame.columns):
        raw = [str(v).strip() for v in frame[name].tolist()]
        for i, v in enumerate(raw):
            if v == "" or v.lower() == "nan":
                raise LoadError(f"empty cell at row {i + 1}, column {name!r}")
        decl = declared.get(name, {})
        kind = decl.get("kind")
        numeric = all(_is_number(v) for v in raw)
        if kind is None or kind == "infer":
            distinct = len(set(raw))
            kind = CATEGORICAL if (not numeric or distinct <= threshold) else CONTINUOUS
        if kind == CONTINUOUS:
            for i, v in enumerate(raw):
                if not _is_number(v):
                    raise LoadError(f"unparseable number {v!r} at row {i + 1}, column {name!r}")
            cells[:, j] = [float(v) for v in raw]
            columns.append(ColumnSchema(name, CONTINUOUS))
        elif kind == CATEGORICAL:
            cats = tuple(str(c) for c in decl["categories"]) if "categories" in decl else None
            if cats is None:
                cats = _sorted_labels(raw)
            col = ColumnSchema(name, CATEGORICAL, cats)
            lookup = {c: k for k, c in enumerate(cats)}
            for i, v in enumerate(raw):
                if v not in lookup:
                    # declared numeric labels may be written differently ("1" vs "1.0")
                    alt = next((c for c in cats if _is_number(c) and _is_number(v) and float(c) == float(v)), None)
                    if alt is None:
                        raise SchemaError(
                            f"unknown category {v!r} at row {i + 1}, column {name!r}"
                        )
                    v = alt
                cells[i, j] = lookup[v]
            columns.append(col)
        else:
            raise SchemaError(f"column {name!r}: unknown kind {kind!r}")
    return Dataset(tuple(columns), cells)


def load_csv(
    path: str | Path,
    schema: Sequence[dict] | str | Path | None = None,
    threshold: int = DEFAULT_CATEGORICAL_THRESHOLD,
) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"no such file: {path}")
    if isinstance(schema, (str, Path)):
        schema = load_schema(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return from_frame(frame, schema, threshold)


def to_frame(d: Dataset, labels: bool = True) -> pd.DataFrame:
    data = {}
    for j, col in enumerate(d.schema):
        if col.is_categorical and labels:
            data[col.name] = [col.categories[int(k)] for k in d.cells[:, j]]
        elif col.is_categorical:
            data[col.name] = d.cells[:, j].astype(np.int64)
        else:
            data[col.name] = d.cells[:, j]
    return pd.DataFrame(data, columns=d.names)


def write_csv(d: Dataset, path: str | Path) -> None:
    to_frame(d).to_csv(path, index=False, float_format="%.17g")


def write_norm_params(d: Dataset, path: str | Path) -> None:
    payload = {
        "mode": d.normalized,
        "columns": [
            {**c.to_json(), "norm": list(c.norm) if c.norm is not None else None} for c in d.schema
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def read_norm_params(path: str | Path) -> tuple[str, dict[str, tuple[float, float]]]:
    payload = json.loads(Path(path).read_text())
    params = {c["name"]: tuple(c["norm"]) for c in payload["columns"] if c.get("norm")}
    return payload["mode"], params


# ---------------------------------------------------------------- normalisation


def normalize(d: Dataset, mode: str = "minmax", mask: np.ndarray | None = None) -> Dataset:
    """Scale continuous columns; statistics come from observed cells only when a mask is given."""
    if mode not in ("minmax", "zscore"):
        raise ValueError(f"unknown normalisation mode {mode!r}")
    if d.normalized is not None:
        raise ValueError(f"dataset already normalised ({d.normalized})")
    cells = d.cells.copy()
    schema = list(d.schema)
    for j, col in enumerate(d.schema):
        if col.is_categorical:
            continue
        values = d.cells[:, j] if mask is None else d.cells[mask[:, j] == 1, j]
        if values.size == 0:
            raise EmptyColumnError(f"column {col.name!r} has no observed cells")
        if mode == "minmax":
            lo, hi = float(values.min()), float(values.max())
            if hi <= lo:
                raise DegenerateColumnError(f"column {col.name!r} is constant ({lo})")
            cells[:, j] = (cells[:, j] - lo) / (hi - lo)
            params = (lo, hi)
        else:
            mu, sd = float(values.mean()), float(values.std())
            if sd <= 0:
                raise DegenerateColumnError(f"column {col.name!r} has zero variance")
            cells[:, j] = (cells[:, j] - mu) / sd
            params = (mu, sd)
        schema[j] = replace(col, norm=params, norm_mode=mode)
    return Dataset(tuple(schema), cells, normalized=mode)


def denormalize_values(col: ColumnSchema, values: np.ndarray) -> np.ndarray:
    if col.norm is None:
        return np.asarray(values, dtype=np.float64)
    a, b = col.norm
    if col.norm_mode == "minmax":
        return np.asarray(values) * (b - a) + a
    return np.asarray(values) * b + a


def denormalize(d: Dataset) -> Dataset:
    if d.normalized is None:
        return d
    cells = d.cells.copy()
    for j, col in enumerate(d.schema):
        if not col.is_categorical:
            cells[:, j] = denormalize_values(col, cells[:, j])
    schema = tuple(replace(c, norm=None, norm_mode=None) for c in d.schema)
    return Dataset(schema, cells, normalized=None)


def observed_statistics(d: Dataset, mask: np.ndarray) -> np.ndarray:
    """Per-column observed mean (continuous) or mode index (categorical, ties -> lowest)."""
    mask = np.asarray(mask)
    if mask.shape != d.cells.shape:
        raise SchemaError(f"mask shape {mask.shape} does not match data {d.cells.shape}")
    out = np.empty(d.p)
    for j, col in enumerate(d.schema):
        obs = d.cells[mask[:, j] == 1, j]
        if obs.size == 0:
            raise EmptyColumnError(f"column {col.name!r} has no observed cells")
        if col.is_categorical:
            counts = np.bincount(obs.astype(np.int64), minlength=col.n_categories)
            out[j] = float(np.argmax(counts))
        else:
            out[j] = obs.mean()
    return out


def observed_frequencies(d: Dataset, mask: np.ndarray, j: int) -> np.ndarray:
    col = d.schema[j]
    obs = d.cells[np.asarray(mask)[:, j] == 1, j].astype(np.int64)
    if obs.size == 0:
        raise EmptyColumnError(f"column {col.name!r} has no observed cells")
    return np.bincount(obs, minlength=col.n_categories) / obs.size


@dataclass
class Imputation:
    """An imputed table plus the soft categorical predictions behind it.

    ``proba[j]`` is an n x C predicted distribution for categorical column j;
    ``embedding[j]`` is (predicted scalar per row, scalar per category) for
    methods that predict categorical cells in a learned embedding space.
    """

    dataset: Dataset
    proba: dict[int, np.ndarray] = field(default_factory=dict)
    embedding: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
