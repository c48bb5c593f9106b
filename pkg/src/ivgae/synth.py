"""Synthetic tables with known low-rank structure."""

from __future__ import annotations

import numpy as np

from .dataio import CATEGORICAL, CONTINUOUS, ColumnSchema, Dataset
from .errors import ConfigError
from .rng import rng


def factor_model(n: int, p: int, rank: int = 2, noise: float = 0.05, seed: int = 0) -> Dataset:
    """x_ij = u_i . v_j + noise, with standard-normal factors.

    ``rank=1`` gives the single-factor table x_j = c_j * u_i + noise.
    """
    if n < 2 or p < 1 or rank < 1:
        raise ConfigError(f"need n >= 2, p >= 1, rank >= 1; got n={n}, p={p}, rank={rank}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    gen = rng(seed, "synth", 0)
    u = gen.standard_normal((n, rank))
    v = gen.standard_normal((rank, p))
    x = u @ v + noise * gen.standard_normal((n, p))
    schema = tuple(ColumnSchema(f"x{j}", CONTINUOUS) for j in range(p))
    return Dataset(schema, x)


def gaussian(n: int, p: int, seed: int = 0) -> Dataset:
    """Independent standard-normal columns."""
    gen = rng(seed, "synth", 1)
    schema = tuple(ColumnSchema(f"x{j}", CONTINUOUS) for j in range(p))
    return Dataset(schema, gen.standard_normal((n, p)))


def mixed_type(
    n: int,
    n_continuous: int = 4,
    n_categorical: int = 2,
    n_categories: int | tuple[int, ...] = 3,
    rank: int = 2,
    noise: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """Continuous and categorical columns driven by shared latent factors.

    A categorical column is a latent projection cut at its empirical
    quantiles, so every category is populated and carries signal about the
    other columns.
    """
    if n_continuous + n_categorical < 1:
        raise ConfigError("need at least one column")
    cats = (n_categories,) * n_categorical if isinstance(n_categories, int) else tuple(n_categories)
    if len(cats) != n_categorical or any(c < 2 for c in cats):
        raise ConfigError(f"need {n_categorical} category counts, each >= 2; got {cats}")
    if n < max(cats, default=2):
        raise ConfigError(f"n={n} too small to populate {max(cats)} categories")
    gen = rng(seed, "synth", 2)
    u = gen.standard_normal((n, rank))
    p = n_continuous + n_categorical
    latent = u @ gen.standard_normal((rank, p)) + noise * gen.standard_normal((n, p))
    cells = np.empty((n, p))
    schema = []
    for j in range(n_continuous):
        cells[:, j] = latent[:, j]
        schema.append(ColumnSchema(f"x{j}", CONTINUOUS))
    for k, c in enumerate(cats):
        j = n_continuous + k
        # rank-based cut gives near-equal category sizes
        ranks = np.argsort(np.argsort(latent[:, j], kind="stable"), kind="stable")
        cells[:, j] = np.minimum(ranks * c // n, c - 1)
        schema.append(ColumnSchema(f"c{k}", CATEGORICAL, tuple(f"k{m}" for m in range(c))))
    return Dataset(tuple(schema), cells)
