"""Report figures rendered next to the delimited outputs.

Everything draws through the Agg backend so the CLI works headless; files
are written atomically like every other output.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

EMOTION_COLORS = {
    "Happiness": "#f2b134",
    "Anger": "#d64545",
    "Sadness": "#4a7fb5",
    "Fear": "#7a5ca3",
    "None": "#9aa0a6",
}


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=150, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def save_label_distribution(stats: dict, path: str | Path) -> None:
    counts = stats["emotion_counts"]
    labels = list(counts)
    values = [counts[l] for l in labels]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(labels, values, color=[EMOTION_COLORS.get(l, "#888888") for l in labels])
    total = sum(values)
    for i, v in enumerate(values):
        share = f" ({v / total:.0%})" if total else ""
        ax.annotate(f"{v}{share}", (i, v), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("spans")
    ax.set_title("Emotion labels over consensus spans")
    _save(fig, path)


def save_span_length_hist(lengths: Sequence[int], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if lengths:
        ax.hist(lengths, bins=min(30, max(lengths) - min(lengths) + 1), color="#4a7fb5")
    ax.set_xlabel("span length (chars)")
    ax.set_ylabel("spans")
    ax.set_title("Span length distribution")
    _save(fig, path)


def save_training_curves(entries: Sequence[dict], path: str | Path) -> None:
    """Loss and validation F1 per epoch with schedule-step boundaries."""
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(10, 3.8))
    epochs = [e["global_epoch"] for e in entries]
    ax_loss.plot(epochs, [e["mean_loss"] for e in entries], color="#d64545")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean training loss")
    ax_loss.set_title("Training loss")

    val_pts = [(e["global_epoch"], e["val_ate_f1"], e["val_joint_f1"]) for e in entries]
    xs = [x for x, a, _ in val_pts if a is not None]
    if xs:
        ax_f1.plot(xs, [a for _, a, _ in val_pts if a is not None], label="ATE F1", color="#4a7fb5")
        ax_f1.plot(xs, [j for _, _, j in val_pts if j is not None], label="joint F1", color="#7a5ca3")
        ax_f1.legend()
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("validation F1")
    ax_f1.set_ylim(0, 1)
    ax_f1.set_title("Validation F1")

    boundaries = [
        e["global_epoch"] for prev, e in zip(entries, entries[1:]) if e["phase"] != prev["phase"]
    ]
    for ax in (ax_loss, ax_f1):
        for b in boundaries:
            ax.axvline(b - 0.5, color="#bbbbbb", linestyle="--", linewidth=0.8)
    _save(fig, path)


def save_confusion_matrix(report_dict: dict, path: str | Path) -> None:
    """Heatmap of gold vs predicted emotions over exact-range matches."""
    labels = list(report_dict["gold_emotion_counts"])
    n = len(labels)
    grid = np.zeros((n, n))
    for key, count in report_dict["confusion"].items():
        g, p = key.split("->")
        grid[labels.index(g), labels.index(p)] = count
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(grid, cmap="Blues")
    ax.set_xticks(range(n), labels, rotation=45, ha="right")
    ax.set_yticks(range(n), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    for i in range(n):
        for j in range(n):
            if grid[i, j]:
                ax.text(j, i, int(grid[i, j]), ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("Emotion confusion (matched spans)")
    _save(fig, path)


def save_fold_scores(cv_result: dict, path: str | Path) -> None:
    folds = cv_result["per_fold"]
    x = np.arange(len(folds))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 3.8))
    ax.bar(x - width / 2, [f["ate_f1"] for f in folds], width, label="ATE F1", color="#4a7fb5")
    ax.bar(x + width / 2, [f["joint_f1"] for f in folds], width, label="joint F1", color="#7a5ca3")
    ax.axhline(cv_result["mean_ate_f1"], color="#4a7fb5", linestyle=":", linewidth=1)
    ax.axhline(cv_result["mean_joint_f1"], color="#7a5ca3", linestyle=":", linewidth=1)
    ax.set_xticks(x, [str(f["fold"] + 1) for f in folds])
    ax.set_xlabel("fold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title(f"{cv_result['k']}-fold cross-validation")
    _save(fig, path)
