"""Figure rendering for training histories and metric reports.

Figures land next to the data files they describe; every CLI report path
calls one of these unless --no-figures is given.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_ORDER, MetricReport  # noqa: E402


def render_history_figure(history: list[dict], path: str | Path) -> None:
    """Train/validation loss curves with the learning rate on a twin axis."""
    epochs = [rec["epoch"] for rec in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [rec["train_loss"] for rec in history], label="train loss",
            color="tab:blue")
    ax.plot(epochs, [rec["val_loss"] for rec in history], label="val loss",
            color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross entropy")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(epochs, [rec["lr"] for rec in history], label="lr", color="tab:green",
             linestyle="--", alpha=0.6)
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metric_figure(report: MetricReport, path: str | Path) -> None:
    """Bar chart of the corpus-level metric values."""
    keys = [k for k in METRIC_ORDER if k in report.corpus]
    values = [report.corpus[k] for k in keys]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    bars = ax.bar(range(len(keys)), values, color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right")
    ax.set_ylabel("score")
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
