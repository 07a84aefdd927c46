"""Figure rendering for training runs and evaluation reports.

Everything draws through the Agg backend straight to PNG files; no
display is ever opened.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np


def save_training_curves(runlog, path) -> Path:
    """Loss / macro-F1 / learning-rate panels over epochs."""
    recs = runlog.records
    if not recs:
        raise ValueError("run log has no epochs to plot")
    epochs = [r.epoch for r in recs]
    fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    axes[0].plot(epochs, [r.train_loss for r in recs], label="train")
    axes[0].plot(epochs, [r.val_loss for r in recs], label="validation")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(epochs, [r.train_macro_f1 for r in recs], label="train")
    axes[1].plot(epochs, [r.val_macro_f1 for r in recs], label="validation")
    if runlog.best_epoch:
        axes[1].axvline(runlog.best_epoch, color="gray", linestyle=":",
                        label=f"best epoch {runlog.best_epoch}")
    axes[1].set_ylabel("macro F1")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].legend()
    axes[2].step(epochs, [r.lr for r in recs], where="post")
    axes[2].set_yscale("log")
    axes[2].set_ylabel("learning rate")
    axes[2].set_xlabel("epoch")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_confusion_matrix(report, path) -> Path:
    """Annotated confusion-matrix heatmap (rows true, columns predicted)."""
    cm = np.asarray(report.confusion)
    names = report.class_names
    k = len(names)
    fig, ax = plt.subplots(figsize=(1.2 * k + 2.5, 1.2 * k + 2.0))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(k), names, rotation=30, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"macro F1 = {report.macro_f1:.4f}")
    threshold = cm.max() / 2 if cm.max() else 0.5
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="white" if cm[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
