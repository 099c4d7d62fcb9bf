"""Figure rendering for the CLI report paths.

Every delimited report the CLI writes gets a companion PNG: loss curve
for training, CMC curves for evaluation, a grouped metric bar chart for
the ablation grid.  Figures are rendered off-screen and written without
a software tag so identical runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport
from .train import EpochStats

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def save_loss_figure(history: Sequence[EpochStats], path: str | Path):
    """Mean triplet loss per epoch with the step schedule on a twin axis."""
    if not history:
        raise ValueError("history must not be empty")
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [h.mean_loss for h in history], color="tab:blue", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean triplet loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.lr for h in history], color="tab:orange", drawstyle="steps-post",
             label="learning rate")
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax.set_title("training loss and schedule")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_cmc_figure(reports: Sequence[EvalReport], path: str | Path):
    """One CMC curve per configuration, rank on x, percent on y."""
    if not reports:
        raise ValueError("reports must not be empty")
    fig, ax = plt.subplots(figsize=(7, 4))
    ks = np.arange(1, len(reports[0].cmc) + 1)
    for r in reports:
        ax.plot(ks, 100.0 * np.asarray(r.cmc), marker="o", markersize=3,
                label=f"{r.config} ({r.protocol})")
    ax.set_xlabel("rank k")
    ax.set_ylabel("matching rate (%)")
    ax.set_xticks(ks)
    ax.set_ylim(-2, 102)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("cumulative matching characteristic")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_ablation_figure(reports: Sequence[EvalReport], path: str | Path):
    """Rank-1 and mAP side by side for each configuration row."""
    if not reports:
        raise ValueError("reports must not be empty")
    labels = [f"{r.config}\n{r.protocol}" for r in reports]
    x = np.arange(len(reports))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(7, 1.1 * len(reports)), 4))
    ax.bar(x - width / 2, [100.0 * r.rank1 for r in reports], width, label="rank-1")
    ax.bar(x + width / 2, [100.0 * r.mean_ap for r in reports], width, label="mAP")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    ax.set_title("re-ranking / re-voting ablation")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
