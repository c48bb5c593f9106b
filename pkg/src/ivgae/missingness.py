"""MCAR / MAR / MNAR mask generation with coverage repair and diagnostics.

Masks follow the convention 1 = observed, 0 = missing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataio import Dataset
from .errors import InfeasibleRateError, MechanismInfeasibleError, SchemaError
from .rng import rng

MCAR, MAR, MNAR = "MCAR", "MAR", "MNAR"
MECHANISMS = (MCAR, MAR, MNAR)
PRESET_RATES = (0.1, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class MaskMatrix:
    m: np.ndarray
    mechanism: str
    rate: float
    seed: int
    mar_config: dict | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.int8)
        if not np.isin(m, (0, 1)).all():
            raise SchemaError("mask entries must be 0 or 1")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    @property
    def missing(self) -> np.ndarray:
        return self.m == 0

    def sidecar(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "rate": self.rate,
            "seed": self.seed,
            "mar_config": self.mar_config,
        }


def full_mask(d: Dataset) -> MaskMatrix:
    return MaskMatrix(np.ones(d.cells.shape, dtype=np.int8), MCAR, 0.0, 0)


def _check_rate(rate: float) -> None:
    if not 0.0 < rate < 1.0:
        raise InfeasibleRateError(f"missing rate must lie in (0, 1), got {rate}")


def repair_coverage(m: np.ndarray, gen: np.random.Generator, frozen_cols=()) -> np.ndarray:
    """Give every row and column at least one observed cell, keeping the zero count.

    Each fix re-observes a missing cell of the empty line and hides an observed
    cell elsewhere whose row and column both keep another observed cell.
    Columns in ``frozen_cols`` never receive new missing cells.
    """
    m = m.copy()
    n, p = m.shape
    frozen = np.zeros(p, dtype=bool)
    frozen[list(frozen_cols)] = True

    def hide_elsewhere(avoid_row=None, avoid_col=None):
        rows_ok = m.sum(axis=1) >= 2
        cols_ok = (m.sum(axis=0) >= 2) & ~frozen
        cand = (m == 1) & rows_ok[:, None] & cols_ok[None, :]
        if avoid_row is not None:
            cand[avoid_row, :] = False
        if avoid_col is not None:
            cand[:, avoid_col] = False
        flat = np.flatnonzero(cand)
        if flat.size == 0:
            return False
        k = flat[gen.integers(flat.size)]
        m[k // p, k % p] = 0
        return True

    for _ in range(n + p + 1):
        empty_rows = np.flatnonzero(m.sum(axis=1) == 0)
        empty_cols = np.flatnonzero(m.sum(axis=0) == 0)
        if empty_rows.size == 0 and empty_cols.size == 0:
            return m
        if empty_rows.size:
            i = int(empty_rows[0])
            # prefer a column that is itself empty, so one swap fixes both
            cols = empty_cols if empty_cols.size else np.arange(p)
            j = int(cols[gen.integers(cols.size)])
            m[i, j] = 1
            if not hide_elsewhere(avoid_row=i, avoid_col=j):
                raise InfeasibleRateError("rate too high to keep every row and column observed")
        else:
            j = int(empty_cols[0])
            i = int(gen.integers(n))
            m[i, j] = 1
            if not hide_elsewhere(avoid_row=i, avoid_col=j):
                raise InfeasibleRateError("rate too high to keep every row and column observed")
    raise InfeasibleRateError("coverage repair did not converge")


def gen_mcar(d: Dataset, rate: float, seed: int) -> MaskMatrix:
    """Hide exactly floor(rate * n * p) cells chosen uniformly without replacement."""
    _check_rate(rate)
    n, p = d.cells.shape
    if rate >= 1.0 - max(1.0 / n, 1.0 / p):
        raise InfeasibleRateError(
            f"rate {rate} leaves too few observed cells for row/column coverage on {n}x{p}"
        )
    gen = rng(seed, "mask", 0)
    k = math.floor(rate * n * p)
    m = np.ones(n * p, dtype=np.int8)
    m[gen.choice(n * p, size=k, replace=False)] = 0
    m = repair_coverage(m.reshape(n, p), gen)
    return MaskMatrix(m, MCAR, rate, seed)


def _tie_broken_order(values: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Ranks of ``values`` (0 = smallest) with seeded random tie-breaking."""
    jitter = gen.permutation(values.size)
    order = np.lexsort((jitter, values))
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    return ranks


def _bisect_quantile(ranks: np.ndarray, want: int, tol: int = 0) -> float:
    """Find q with #{rank >= q * n} == want by bisection on q in [0, 1]."""
    n = ranks.size
    lo, hi = 0.0, 1.0
    q = 1.0 - want / n
    for _ in range(64):
        q = 0.5 * (lo + hi)
        hidden = int(np.count_nonzero(ranks >= q * n))
        if abs(hidden - want) <= tol:
            break
        if hidden > want:
            lo = q
        else:
            hi = q
    return q


def gen_mar(d: Dataset, rate: float, seed: int, driver_frac: float = 0.3) -> MaskMatrix:
    """Threshold missingness of target columns on a fully observed driver column.

    Each target column is hidden where its driver exceeds a per-column
    quantile q.  q is found by bisection so that the global missing fraction
    matches ``rate``; driver ties are broken by a seeded permutation.
    """
    _check_rate(rate)
    n, p = d.cells.shape
    if p < 2:
        raise MechanismInfeasibleError("MAR needs at least two columns")
    if not 0.0 < driver_frac < 1.0:
        raise InfeasibleRateError(f"driver_frac must lie in (0, 1), got {driver_frac}")
    gen = rng(seed, "mask", 1)
    n_drivers = min(max(1, math.ceil(driver_frac * p)), p - 1)
    perm = gen.permutation(p)
    drivers = sorted(int(c) for c in perm[:n_drivers])
    targets = sorted(int(c) for c in perm[n_drivers:])
    total = math.floor(rate * n * p)
    # spread the missing count over targets, never emptying a column
    base, extra = divmod(total, len(targets))
    if base + (1 if extra else 0) > n - 1:
        raise InfeasibleRateError(
            f"rate {rate} unreachable with {len(targets)} target columns of {n} rows"
        )
    driver_order = [drivers[k] for k in gen.permutation(n_drivers)]
    pairing = {t: driver_order[k % n_drivers] for k, t in enumerate(targets)}
    extra_cols = set(int(c) for c in gen.choice(targets, size=extra, replace=False))
    m = np.ones((n, p), dtype=np.int8)
    quantiles = {}
    for t in targets:
        want = base + (1 if t in extra_cols else 0)
        ranks = _tie_broken_order(d.cells[:, pairing[t]], gen)
        q = _bisect_quantile(ranks, want)
        quantiles[t] = q
        m[ranks >= q * n, t] = 0
    m = repair_coverage(m, gen, frozen_cols=drivers)
    cfg = {
        "drivers": drivers,
        "targets": targets,
        "pairing": {str(t): pairing[t] for t in targets},
        "quantiles": {str(t): quantiles[t] for t in targets},
        "driver_frac": driver_frac,
    }
    return MaskMatrix(m, MAR, rate, seed, cfg)


def _two_level_probs(
    n: int, heavy: np.ndarray, rate: float, boost: float
) -> tuple[float, float] | None:
    """(p_light, p_heavy) with mean rate, p_heavy = boost * p_light; None if p_heavy > 1."""
    frac = heavy.sum() / n
    p0 = rate / (frac * boost + (1.0 - frac))
    if boost * p0 > 1.0:
        return None
    return p0, boost * p0


def gen_mnar(d: Dataset, rate: float, seed: int, boost: float = 3.0) -> MaskMatrix:
    """Self-dependent missingness.

    Continuous columns: cells in the top or bottom decile of their own column
    are ``boost`` times as likely to be hidden.  Categorical columns: categories
    are taken in a seeded random order and added to the boosted set until the
    target rate is reachable with probabilities <= 1.
    """
    _check_rate(rate)
    if boost < 1.0:
        raise InfeasibleRateError(f"boost must be >= 1, got {boost}")
    n, p = d.cells.shape
    gen = rng(seed, "mask", 2)
    probs = np.empty((n, p))
    for j, col in enumerate(d.schema):
        x = d.cells[:, j]
        if col.is_categorical:
            order = gen.permutation(col.n_categories)
            sol = None
            for k in range(1, col.n_categories + 1):
                heavy = np.isin(x, order[:k])
                sol = _two_level_probs(n, heavy, rate, boost)
                if sol is not None:
                    break
            if sol is None:
                raise InfeasibleRateError(
                    f"column {col.name!r}: rate {rate} unreachable with boost {boost}"
                )
        else:
            lo, hi = np.quantile(x, [0.1, 0.9])
            heavy = (x <= lo) | (x >= hi)
            sol = _two_level_probs(n, heavy, rate, boost)
            if sol is None:
                # extremes saturate at 1; the rest carries the remaining mass
                frac = heavy.sum() / n
                sol = ((rate - frac) / (1.0 - frac), 1.0)
        p_light, p_heavy = sol
        probs[:, j] = np.where(heavy, p_heavy, p_light)
    m = (gen.random((n, p)) >= probs).astype(np.int8)
    m = repair_coverage(m, gen)
    return MaskMatrix(m, MNAR, rate, seed, {"boost": boost})


def generate(d: Dataset, mechanism: str, rate: float, seed: int, **kw) -> MaskMatrix:
    mech = mechanism.upper()
    if mech == MCAR:
        return gen_mcar(d, rate, seed)
    if mech == MAR:
        return gen_mar(d, rate, seed, **kw)
    if mech == MNAR:
        return gen_mnar(d, rate, seed, **kw)
    raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


# ---------------------------------------------------------------- diagnostics


@dataclass
class MaskReport:
    global_rate: float
    column_rates: list[float]
    min_row_observed: int
    min_col_observed: int
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "global_rate": self.global_rate,
            "column_rates": self.column_rates,
            "min_row_observed": self.min_row_observed,
            "min_col_observed": self.min_col_observed,
            "diagnostics": self.diagnostics,
        }


def point_biserial(missing: np.ndarray, values: np.ndarray) -> float:
    if missing.all() or not missing.any() or values.std() == 0:
        return 0.0
    return float(np.corrcoef(missing.astype(np.float64), values)[0, 1])


def driver_gap(missing: np.ndarray, driver: np.ndarray) -> float:
    """P(missing | driver > median) - P(missing | driver <= median)."""
    med = np.median(driver)
    above = driver > med
    if above.all() or not above.any():
        return 0.0
    return float(missing[above].mean() - missing[~above].mean())


def extreme_decile_ratio(missing: np.ndarray, values: np.ndarray) -> float:
    lo, hi = np.quantile(values, [0.1, 0.9])
    extreme = (values <= lo) | (values >= hi)
    mid = missing[~extreme].mean() if (~extreme).any() else 0.0
    ext = missing[extreme].mean() if extreme.any() else 0.0
    return float(ext / mid) if mid > 0 else float("inf")


def mask_stats(mask: MaskMatrix, d: Dataset) -> MaskReport:
    m = mask.m
    if m.shape != d.cells.shape:
        raise SchemaError(f"mask shape {m.shape} does not match data {d.cells.shape}")
    missing = m == 0
    diag: dict = {
        "point_biserial": [point_biserial(missing[:, j], d.cells[:, j]) for j in range(d.p)]
    }
    if mask.mechanism == MAR and mask.mar_config:
        pairing = mask.mar_config["pairing"]
        diag["driver_gap"] = {
            t: driver_gap(missing[:, int(t)], d.cells[:, drv]) for t, drv in pairing.items()
        }
        diag["driver_missing"] = float(missing[:, mask.mar_config["drivers"]].mean())
    if mask.mechanism == MNAR:
        cont = d.continuous_idx
        ext = missing[:, cont] if cont else np.zeros((d.n, 0), dtype=bool)
        ratios = [extreme_decile_ratio(missing[:, j], d.cells[:, j]) for j in cont]
        pooled_ext, pooled_mid = [], []
        for j in cont:
            lo, hi = np.quantile(d.cells[:, j], [0.1, 0.9])
            e = (d.cells[:, j] <= lo) | (d.cells[:, j] >= hi)
            pooled_ext.append(missing[e, j])
            pooled_mid.append(missing[~e, j])
        if ext.size:
            mid_rate = np.concatenate(pooled_mid).mean()
            ext_rate = np.concatenate(pooled_ext).mean()
        else:
            mid_rate = ext_rate = 0.0
        diag["extreme_decile_ratio"] = (
            float(ext_rate / mid_rate) if mid_rate > 0 else float("inf")
        )
        diag["extreme_decile_rate"] = float(ext_rate)
        diag["middle_rate"] = float(mid_rate)
        diag["column_extreme_ratio"] = ratios
    return MaskReport(
        global_rate=float(missing.mean()),
        column_rates=[float(r) for r in missing.mean(axis=0)],
        min_row_observed=int(m.sum(axis=1).min()),
        min_col_observed=int(m.sum(axis=0).min()),
        diagnostics=diag,
    )


# ---------------------------------------------------------------- file format


def write_mask(mask: MaskMatrix, names: list[str], path: str | Path) -> Path:
    """Write the 0/1 CSV plus a ``<path>.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    pd.DataFrame(mask.m.astype(int), columns=names).to_csv(path, index=False)
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(mask.sidecar(), indent=2, sort_keys=True))
    return side


def read_mask(path: str | Path) -> MaskMatrix:
    path = Path(path)
    m = pd.read_csv(path).to_numpy()
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return MaskMatrix(
        m,
        meta.get("mechanism", MCAR),
        float(meta.get("rate", 1.0 - m.mean())),
        int(meta.get("seed", 0)),
        meta.get("mar_config"),
    )
