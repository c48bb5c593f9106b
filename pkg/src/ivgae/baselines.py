"""Mean/mode and k-nearest-neighbour imputers."""

from __future__ import annotations

import numpy as np

from .dataio import Dataset, Imputation, observed_frequencies, observed_statistics
from .errors import ConfigError, SchemaError

PROBA_FLOOR = 1e-6


def _check(dataset: Dataset, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(getattr(mask, "m", mask))
    if mask.shape != dataset.cells.shape:
        raise SchemaError(f"mask shape {mask.shape} does not match data {dataset.cells.shape}")
    return mask


def baseline_mean_mode(dataset: Dataset, mask) -> Imputation:
    """Continuous gaps get the observed column mean, categorical gaps the observed mode.

    The predicted distribution for a categorical gap is the observed
    category frequency of its column.
    """
    mask = _check(dataset, mask)
    fill = observed_statistics(dataset, mask)
    cells = dataset.cells.copy()
    proba = {}
    for j, col in enumerate(dataset.schema):
        gaps = mask[:, j] == 0
        cells[gaps, j] = fill[j]
        if col.is_categorical:
            freq = observed_frequencies(dataset, mask, j)
            proba[j] = np.tile(_floor(freq), (dataset.n, 1))
    return Imputation(dataset.with_cells(cells), proba)


def _floor(p: np.ndarray) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), PROBA_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def knn_distances(dataset: Dataset, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared distances averaged over co-observed features, and the co-observed counts.

    Continuous features are compared on the observed-statistics Min-Max
    scale, categorical features by Hamming mismatch.
    """
    mask = _check(dataset, mask)
    obs = mask.astype(np.float64)
    total = np.zeros((dataset.n, dataset.n))
    for j, col in enumerate(dataset.schema):
        x = dataset.cells[:, j]
        if not col.is_categorical:
            seen = x[mask[:, j] == 1]
            lo, hi = (seen.min(), seen.max()) if seen.size else (0.0, 1.0)
            # a column with one distinct observed value contributes zero distance
            x = (x - lo) / (hi - lo if hi > lo else 1.0)
        both = np.outer(obs[:, j], obs[:, j])
        if col.is_categorical:
            diff = (x[:, None] != x[None, :]).astype(np.float64)
        else:
            diff = (x[:, None] - x[None, :]) ** 2
        total += both * diff
    count = obs @ obs.T
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(count > 0, total / np.maximum(count, 1), np.inf)
    np.fill_diagonal(dist, np.inf)
    return dist, count


def baseline_knn(dataset: Dataset, mask, k: int = 5) -> Imputation:
    """Average (continuous) or majority vote (categorical) of the k nearest donors.

    Donors for cell (i, j) are the other rows with column j observed and at
    least one feature co-observed with row i; distance ties go to the lower
    row index.  A cell without donors falls back to the mean/mode fill.
    """
    mask = _check(dataset, mask)
    n = dataset.n
    if k < 1 or k > n - 1:
        raise ConfigError(f"k must lie in [1, n-1] = [1, {n - 1}], got {k}")
    dist, count = knn_distances(dataset, mask)
    fallback = baseline_mean_mode(dataset, mask)
    cells = dataset.cells.copy()
    proba = {j: p.copy() for j, p in fallback.proba.items()}
    for j, col in enumerate(dataset.schema):
        gaps = np.flatnonzero(mask[:, j] == 0)
        if gaps.size == 0:
            continue
        donors_ok = mask[:, j] == 1
        for i in gaps:
            usable = donors_ok & (count[i] > 0)
            usable[i] = False
            cand = np.flatnonzero(usable)
            if cand.size == 0:
                cells[i, j] = fallback.dataset.cells[i, j]
                continue
            # stable sort on distance keeps lower indices first among ties
            nearest = cand[np.argsort(dist[i, cand], kind="stable")[:k]]
            values = dataset.cells[nearest, j]
            if col.is_categorical:
                votes = np.bincount(values.astype(np.int64), minlength=col.n_categories)
                cells[i, j] = float(np.argmax(votes))
                proba[j][i] = _floor(votes / votes.sum())
            else:
                cells[i, j] = values.mean()
    return Imputation(dataset.with_cells(cells), proba)
