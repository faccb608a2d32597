"""Matplotlib renderings of evaluation and embedding artefacts."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import Label  # noqa: E402
from .evalkit import RocCurve, row_normalized  # noqa: E402
from .explain import EmbeddingPoint  # noqa: E402


def _save(fig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    meta = {"Software": None} if str(path).endswith(".png") else {"Date": None}
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=meta)
    plt.close(fig)


def plot_roc(curves: Mapping[str, RocCurve], path: str | Path, title: str = "ROC") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, c in curves.items():
        ax.plot(c.fpr, c.tpr, label=f"{name} (AUC {c.auc:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_average_roc(curves: Mapping[str, tuple[np.ndarray, np.ndarray, float]],
                     path: str | Path) -> None:
    """One averaged curve per experiment: ``{name: (fpr, tpr, auc)}``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (fpr, tpr, auc) in curves.items():
        ax.plot(fpr, tpr, label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title("Average ROC")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_confusion(cm: np.ndarray, path: str | Path, title: str = "Normalized confusion") -> None:
    norm = row_normalized(cm)
    names = [lab.name for lab in Label]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    for i in range(norm.shape[0]):
        for j in range(norm.shape[1]):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_embedding(points: Sequence[EmbeddingPoint], path: str | Path, by: str = "label") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    groups = sorted({getattr(p, by) for p in points})
    for g in groups:
        xy = np.array([(p.x, p.y) for p in points if getattr(p, by) == g])
        ax.scatter(xy[:, 0], xy[:, 1], s=8, label=g)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"t-SNE by {by}")
    ax.legend(fontsize=8, markerscale=2)
    _save(fig, path)
