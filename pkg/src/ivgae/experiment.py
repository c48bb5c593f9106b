"""Experiment runner: mask -> impute -> score, per seed, with reports on disk.

Outputs in the experiment directory:

- ``metrics.json``: spec, one entry per seed and the aggregate over seeds.
  It holds no wall-clock values so that identical specs give identical
  bytes; timings go to ``timing.json``.
- ``tidy.csv``: long format (mechanism, rate, seed, method, column, avg_err).
- ``mask_seed<k>.csv`` / ``imputed_seed<k>.csv``: per-seed tables.
- ``avg_err.png`` (and ``loss_seed<k>.png`` for ivgae): figures.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import plotting
from .baselines import baseline_knn, baseline_mean_mode
from .config import TrainConfig, build_configs
from .dataio import Dataset, load_csv, write_csv
from .errors import ConfigError
from .metrics import avg_err
from .missingness import MECHANISMS, generate, write_mask
from .synth import factor_model, gaussian, mixed_type

logger = logging.getLogger(__name__)

METHODS = ("ivgae", "mean", "knn")
TIDY_FIELDS = ("mechanism", "rate", "seed", "method", "column", "avg_err")
BUILTIN = {"concrete": "concrete.csv"}

_NUM_OR_NULL = {"type": ["number", "null"]}

# JSON Schema of metrics.json written by run_experiment
REPORT_SCHEMA = {
    "type": "object",
    "required": ["spec", "per_seed", "aggregate"],
    "additionalProperties": False,
    "properties": {
        "spec": {
            "type": "object",
            "required": ["dataset", "mechanism", "rate", "seeds", "method", "method_config"],
            "properties": {
                "dataset": {"type": "object"},
                "mechanism": {"enum": ["mcar", "mar", "mnar"]},
                "rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "method": {"enum": list(METHODS)},
                "method_config": {"type": "object"},
            },
        },
        "per_seed": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "per_column", "macro", "seconds", "status"],
                "properties": {
                    "seed": {"type": "integer"},
                    "per_column": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                    "macro": _NUM_OR_NULL,
                    "seconds": {"type": "null"},
                    "status": {"type": "string"},
                    "metric": {"type": "object", "additionalProperties": {"enum": ["mse", "emb_mse", "cross_entropy"]}},
                    "notes": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["mean", "std", "n_ok", "n_failed"],
            "properties": {
                "mean": _NUM_OR_NULL,
                "std": _NUM_OR_NULL,
                "n_ok": {"type": "integer", "minimum": 0},
                "n_failed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: dict
    mechanism: str = "mcar"
    rate: float = 0.3
    seeds: tuple[int, ...] = (0,)
    method: str = "ivgae"
    method_config: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 < self.rate < 1.0:
            raise ConfigError(f"rate must lie in (0, 1), got {self.rate}")
        object.__setattr__(self, "mechanism", str(self.mechanism).lower())
        if self.mechanism.upper() not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if "path" not in self.dataset and "synth" not in self.dataset and "builtin" not in self.dataset:
            raise ConfigError("dataset needs one of: path, synth, builtin")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def from_json(cls, payload: dict) -> ExperimentSpec:
        known = {"dataset", "mechanism", "rate", "seeds", "method", "method_config", "out"}
        extra = set(payload) - known
        if extra:
            raise ConfigError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**payload)

    def to_json(self) -> dict:
        # the output directory is deliberately left out: reruns elsewhere must match byte for byte
        out = asdict(self)
        out.pop("out")
        out["seeds"] = list(self.seeds)
        return out


def load_dataset(source: dict) -> Dataset:
    """Resolve a dataset reference: a CSV path (+schema), a built-in table or a synthetic generator."""
    if "path" in source:
        return load_csv(source["path"], source.get("schema"), source.get("threshold", 10))
    if "builtin" in source:
        name = source["builtin"]
        if name not in BUILTIN:
            raise ConfigError(f"unknown built-in dataset {name!r}; have {sorted(BUILTIN)}")
        with resources.as_file(resources.files("ivgae") / "data" / BUILTIN[name]) as path:
            return load_csv(path, source.get("schema"), source.get("threshold", 10))
    cfg = dict(source["synth"])
    kind = cfg.pop("kind", "factor")
    makers = {"factor": factor_model, "gaussian": gaussian, "mixed": mixed_type}
    if kind not in makers:
        raise ConfigError(f"unknown synthetic generator {kind!r}; have {sorted(makers)}")
    try:
        return makers[kind](**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for synthetic generator {kind!r}: {exc}") from exc


def impute_with(method: str, dataset: Dataset, mask, config: dict, seed: int, log_path=None):
    """Run one imputer; returns (Imputation, AvgErr mode)."""
    if method == "mean":
        return baseline_mean_mode(dataset, mask), "onehot"
    if method == "knn":
        return baseline_knn(dataset, mask, int(config.get("k", 5))), "onehot"
    from .trainer import fit_impute

    model_cfg, train_cfg = build_configs(config, train=TrainConfig.desk(seed=seed))
    _, imp = fit_impute(dataset, mask, model_cfg, train_cfg, log_path=log_path)
    return imp, model_cfg.embedding_mode


def _run_seed(spec: ExperimentSpec, seed: int, out: Path | None) -> tuple[dict, float]:
    start = time.perf_counter()
    entry = {"seed": seed, "per_column": {}, "macro": None, "status": "ok"}
    try:
        truth = load_dataset(spec.dataset)
        mask = generate(truth, spec.mechanism, spec.rate, seed)
        log_path = out / f"progress_seed{seed}.csv" if out is not None and spec.method == "ivgae" else None
        imp, mode = impute_with(spec.method, truth, mask, spec.method_config, seed, log_path)
        report = avg_err(truth, imp, mask, mode=mode)
        entry.update(per_column=report.per_column, macro=report.macro, metric=report.metric)
        if report.notes:
            entry["notes"] = report.notes
        if out is not None:
            write_mask(mask, truth.names, out / f"mask_seed{seed}.csv")
            write_csv(imp.dataset, out / f"imputed_seed{seed}.csv")
    except Exception as exc:  # a failed seed is reported, not fatal
        logger.exception("seed %d failed", seed)
        entry["status"] = f"failed: {type(exc).__name__}: {exc}"
    return entry, time.perf_counter() - start


def _workers(n_jobs: int) -> int:
    raw = os.environ.get("IVGAE_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"IVGAE_THREADS must be a positive integer, got {raw!r}") from None
    return min(cap, n_jobs)


def tidy_rows(spec: ExperimentSpec, per_seed: list[dict]) -> list[dict]:
    rows = []
    for entry in per_seed:
        for column, value in entry["per_column"].items():
            rows.append(
                {"mechanism": spec.mechanism, "rate": spec.rate, "seed": entry["seed"],
                 "method": spec.method, "column": column, "avg_err": value}
            )
        if not entry["per_column"]:
            rows.append(
                {"mechanism": spec.mechanism, "rate": spec.rate, "seed": entry["seed"],
                 "method": spec.method, "column": None, "avg_err": None}
            )
    return rows


def run_experiment(spec: ExperimentSpec, figures: bool = True) -> dict:
    """Run every seed of ``spec`` and write the reports to ``spec.out`` (when set)."""
    out = Path(spec.out) if spec.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    workers = _workers(len(spec.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, [spec] * len(spec.seeds), spec.seeds, [out] * len(spec.seeds)))
    else:
        results = [_run_seed(spec, seed, out) for seed in spec.seeds]
    per_seed = [entry for entry, _ in results]
    for entry in per_seed:
        # wall-clock lives in timing.json so metrics.json stays byte-stable
        entry["seconds"] = None
    macros = [e["macro"] for e in per_seed if e["status"] == "ok" and e["macro"] is not None]
    aggregate = {
        "mean": float(np.mean(macros)) if macros else None,
        "std": float(np.std(macros)) if macros else None,
        "n_ok": len(macros),
        "n_failed": len(per_seed) - len(macros),
    }
    report = {"spec": spec.to_json(), "per_seed": per_seed, "aggregate": aggregate}
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(
            json.dumps({str(e["seed"]): secs for e, secs in zip(per_seed, [s for _, s in results])}, indent=2) + "\n"
        )
        tidy = pd.DataFrame(tidy_rows(spec, per_seed), columns=TIDY_FIELDS)
        tidy.to_csv(out / "tidy.csv", index=False, float_format="%.17g")
        if figures:
            _figures(spec, tidy, out)
    return report


def _figures(spec: ExperimentSpec, tidy: pd.DataFrame, out: Path) -> None:
    if tidy["avg_err"].notna().any():
        title = f"{spec.method}, {spec.mechanism} @ {spec.rate:g}"
        plotting.column_errors(tidy, out / "avg_err.png", title)
    for seed in spec.seeds:
        log = out / f"progress_seed{seed}.csv"
        if log.exists() and log.stat().st_size > 0:
            frame = pd.read_csv(log)
            if len(frame):
                plotting.training_curve(frame, out / f"loss_seed{seed}.png", f"seed {seed}")


def expand_grid(payload: dict) -> list[ExperimentSpec]:
    """Turn a config whose mechanism / rate / method fields may be lists into one spec per cell.

    Each cell writes to ``<out>/<mechanism>_<rate>_<method>``; a single-cell config writes to ``<out>`` itself.
    """
    def as_list(v):
        return list(v) if isinstance(v, (list, tuple)) else [v]

    base = dict(payload)
    mechs = as_list(base.pop("mechanism", "mcar"))
    rates = as_list(base.pop("rate", 0.3))
    methods = as_list(base.pop("method", "ivgae"))
    method_configs = base.pop("method_config", {})
    out = base.pop("out", None)
    single = len(mechs) * len(rates) * len(methods) == 1
    specs = []
    for mech in mechs:
        for rate in rates:
            for method in methods:
                cfg = method_configs.get(method, {}) if set(method_configs) & set(METHODS) else method_configs
                cell_out = None if not out else out if single else str(Path(out) / f"{mech}_{rate:g}_{method}")
                specs.append(
                    ExperimentSpec.from_json(
                        {**base, "mechanism": mech, "rate": rate, "method": method, "method_config": cfg, "out": cell_out}
                    )
                )
    return specs


def run_suite(payload: dict, figures: bool = True) -> dict:
    """Run every cell of a (possibly gridded) config; writes a combined tidy CSV and summary figure."""
    specs = expand_grid(payload)
    reports = [run_experiment(spec, figures=figures) for spec in specs]
    out = payload.get("out")
    if out and len(specs) > 1:
        frames = [pd.DataFrame(tidy_rows(s, r["per_seed"]), columns=TIDY_FIELDS) for s, r in zip(specs, reports)]
        tidy = pd.concat(frames, ignore_index=True)
        tidy.to_csv(Path(out) / "tidy.csv", index=False, float_format="%.17g")
        if figures and tidy["avg_err"].notna().any():
            plotting.macro_summary(tidy, Path(out) / "summary.png")
    return {"cells": [{"spec": r["spec"], "aggregate": r["aggregate"]} for r in reports]}
