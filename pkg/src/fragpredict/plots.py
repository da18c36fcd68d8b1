"""Matplotlib figure rendering for the evaluation report path.

Figures are written to files next to the delimited/text outputs; the
headless Agg backend is forced so this works in batch environments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import RocCurve


def save_roc_figure(
    curves: list[tuple[str, RocCurve]], path: str | Path, title: str = "ROC Curves"
) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 4.4), dpi=150)
    for name, curve in curves:
        ax.plot(curve.fpr, curve.tpr, lw=1.6, label=f"{name} (AUC = {curve.auc:.2f})")
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=1.0, label="chance")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("False Positive Rate")
    ax.set_ylabel("True Positive Rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_history_figure(history: list[dict], path: str | Path) -> None:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.6), dpi=150)
    ax1.plot(epochs, [h["train_loss"] for h in history], label="train")
    ax1.plot(epochs, [h["val_loss"] for h in history], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [h["val_accuracy"] for h in history], c="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation accuracy")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
