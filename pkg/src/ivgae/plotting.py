"""PNG figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


def column_errors(tidy: pd.DataFrame, path: str | Path, title: str = "") -> Path:
    """Bar chart of per-column AvgErr, mean over seeds with a std whisker, one bar group per method."""
    ok = tidy.dropna(subset=["avg_err"])
    stats = ok.groupby(["column", "method"], sort=False)["avg_err"].agg(["mean", "std"]).reset_index()
    columns = list(dict.fromkeys(stats["column"]))
    methods = list(dict.fromkeys(stats["method"]))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(columns) + 2), 3.5))
    x = np.arange(len(columns))
    for k, method in enumerate(methods):
        sub = stats[stats["method"] == method].set_index("column").reindex(columns)
        ax.bar(x + k * width, sub["mean"], width, yerr=sub["std"].fillna(0.0), label=method, capsize=2)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(columns, rotation=45, ha="right")
    ax.set_ylabel("AvgErr")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def macro_summary(tidy: pd.DataFrame, path: str | Path) -> Path:
    """Macro AvgErr per (mechanism, rate) cell, one bar per method."""
    ok = tidy.dropna(subset=["avg_err"])
    macro = ok.groupby(["mechanism", "rate", "seed", "method"], sort=False)["avg_err"].mean().reset_index()
    cells = macro.groupby(["mechanism", "rate", "method"], sort=False)["avg_err"].agg(["mean", "std"]).reset_index()
    cells["cell"] = cells["mechanism"] + " @ " + cells["rate"].map(lambda r: f"{r:g}")
    labels = list(dict.fromkeys(cells["cell"]))
    methods = list(dict.fromkeys(cells["method"]))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(labels) + 2), 3.5))
    x = np.arange(len(labels))
    for k, method in enumerate(methods):
        sub = cells[cells["method"] == method].set_index("cell").reindex(labels)
        ax.bar(x + k * width, sub["mean"], width, yerr=sub["std"].fillna(0.0), label=method, capsize=2)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_ylabel("macro AvgErr")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def training_curve(log: pd.DataFrame, path: str | Path, title: str = "") -> Path:
    """Loss components per epoch from a progress log."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(log["epoch"], log["l_imp"], lw=0.8)
    axes[0].set_yscale("log")
    axes[0].set_title("imputation loss")
    axes[1].plot(log["epoch"], log["recon"], lw=0.8, label="recon")
    axes[1].plot(log["epoch"], log["kl"], lw=0.8, label="kl")
    axes[1].set_title("ELBO terms")
    axes[1].legend(frameon=False)
    for ax in axes:
        ax.set_xlabel("epoch")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
