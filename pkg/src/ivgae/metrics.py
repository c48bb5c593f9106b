"""Per-column imputation error on masked cells and its macro average."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset, Imputation
from .errors import SchemaError

logger = logging.getLogger(__name__)

PROBA_FLOOR = 1e-12

# JSON Schema of the metrics.json written by ``ivgae evaluate``
EVALUATE_SCHEMA = {
    "type": "object",
    "required": ["truth", "imputed", "per_column", "macro", "metric", "excluded", "notes"],
    "properties": {
        "truth": {"type": "string"},
        "imputed": {"type": "string"},
        "per_column": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "macro": {"type": ["number", "null"]},
        "metric": {"type": "object", "additionalProperties": {"enum": ["mse", "emb_mse", "cross_entropy"]}},
        "excluded": {"type": "array", "items": {"type": "string"}},
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass
class MetricsReport:
    per_column: dict[str, float]
    macro: float | None
    metric: dict[str, str] = field(default_factory=dict)  # column -> mse | emb_mse | cross_entropy
    excluded: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_column": dict(self.per_column),
            "macro": self.macro,
            "metric": dict(self.metric),
            "excluded": list(self.excluded),
            "notes": list(self.notes),
        }


def minmax_ranges(truth: Dataset) -> dict[int, tuple[float, float]]:
    """Min-Max range of every continuous column of the complete table."""
    out = {}
    for j in truth.continuous_idx:
        col = truth.cells[:, j]
        lo, hi = float(col.min()), float(col.max())
        out[j] = (lo, hi if hi > lo else lo + 1.0)
    return out


def _proba_from_labels(labels: np.ndarray, n_categories: int) -> np.ndarray:
    eye = np.eye(n_categories)[labels.astype(np.int64)]
    return np.maximum(eye, 1e-6) / np.maximum(eye, 1e-6).sum(axis=1, keepdims=True)


def avg_err(
    truth: Dataset,
    imputed: Imputation | Dataset,
    mask,
    mode: str = "onehot",
    ranges: dict[int, tuple[float, float]] | None = None,
) -> MetricsReport:
    """AvgErr per column over cells with mask == 0.

    Continuous columns: mean squared difference after Min-Max scaling with
    the complete-table range (``ranges`` overrides it).  Categorical columns:
    with ``mode="hetero"`` and an embedding prediction available, the squared
    difference between the predicted scalar and the true category's scalar;
    otherwise the cross-entropy of the predicted distribution against the
    true label (a hard fill counts as a near one-hot distribution).
    """
    if mode not in ("onehot", "hetero"):
        raise ValueError(f"unknown AvgErr mode {mode!r}")
    imp = imputed if isinstance(imputed, Imputation) else Imputation(imputed)
    mask = np.asarray(getattr(mask, "m", mask))
    if truth.cells.shape != imp.dataset.cells.shape or mask.shape != truth.cells.shape:
        raise SchemaError(
            f"shape mismatch: truth {truth.cells.shape}, imputed {imp.dataset.cells.shape}, mask {mask.shape}"
        )
    ranges = minmax_ranges(truth) if ranges is None else ranges
    report = MetricsReport({}, None)
    for j, col in enumerate(truth.schema):
        gaps = np.flatnonzero(mask[:, j] == 0)
        if gaps.size == 0:
            report.excluded.append(col.name)
            report.notes.append(f"column {col.name!r} has no masked cells; excluded from macro")
            continue
        t = truth.cells[gaps, j]
        if not col.is_categorical:
            lo, hi = ranges[j]
            diff = (imp.dataset.cells[gaps, j] - t) / (hi - lo)
            value, kind = float(np.mean(diff**2)), "mse"
        elif mode == "hetero" and j in imp.embedding:
            pred, scalars = imp.embedding[j]
            diff = np.asarray(pred)[gaps] - np.asarray(scalars)[t.astype(np.int64)]
            value, kind = float(np.mean(diff**2)), "emb_mse"
        else:
            if j in imp.proba:
                proba = np.asarray(imp.proba[j])[gaps]
            else:
                proba = _proba_from_labels(imp.dataset.cells[gaps, j], col.n_categories)
            picked = proba[np.arange(gaps.size), t.astype(np.int64)]
            value, kind = float(-np.mean(np.log(np.maximum(picked, PROBA_FLOOR)))), "cross_entropy"
        report.per_column[col.name] = value
        report.metric[col.name] = kind
    if report.per_column:
        report.macro = float(np.mean(list(report.per_column.values())))
    else:
        logger.warning("no masked cells in any column; macro AvgErr undefined")
    return report
