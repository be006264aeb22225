"""Figures written next to the CSV/JSON outputs: loss curves, embedding scatter, confusion matrix."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .finetune import POLARITIES  # noqa: E402

COLORS = {"positive": "tab:green", "neutral": "tab:gray", "negative": "tab:red"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[dict], path, keys=("total", "sup", "rec", "map")) -> Path:
    """One line per loss component against the optimiser step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for k in keys:
        if rows and k in rows[0]:
            ax.plot(steps, [float(r[k]) for r in rows], label=k, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend()
    return _save(fig, path)


def pca_2d(reps: np.ndarray) -> np.ndarray:
    x = np.asarray(reps, dtype=np.float64)
    x = x - x.mean(axis=0)
    if x.shape[0] < 2:
        return np.zeros((x.shape[0], 2))
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[:2].T
    return proj if proj.shape[1] == 2 else np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))


def plot_embeddings(reps: np.ndarray, labels: Sequence[str], tags: Sequence[str], path) -> Path:
    """Two-component PCA of sentiment representations; circles are ESE, crosses ISE."""
    xy = pca_2d(reps)
    labels, tags = np.asarray(labels), np.asarray(tags)
    fig, ax = plt.subplots(figsize=(5, 5))
    for tag, marker in (("ESE", "o"), ("ISE", "x")):
        for pol in POLARITIES:
            k = (labels == pol) & (tags == tag)
            if k.any():
                ax.scatter(xy[k, 0], xy[k, 1], s=12, marker=marker, c=COLORS[pol], label=f"{pol} / {tag}", alpha=0.7)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_confusion(matrix: np.ndarray, path, classes=POLARITIES) -> Path:
    """Rows are gold labels, columns predictions."""
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(m, cmap="Blues")
    ax.set_xticks(range(len(classes)), classes, rotation=30)
    ax.set_yticks(range(len(classes)), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, str(int(m[i, j])), ha="center", va="center",
                    color="white" if m[i, j] > m.max() / 2 else "black")
    return _save(fig, path)


def plot_gain(per_seed: Sequence[dict], path) -> Path:
    """Implicit-slice accuracy for both arms per seed."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    seeds = [str(r["seed"]) for r in per_seed]
    x = np.arange(len(seeds))
    ax.bar(x - 0.2, [r["scapt_ise"] for r in per_seed], 0.4, label="SCAPT")
    ax.bar(x + 0.2, [r["baseline_ise"] for r in per_seed], 0.4, label="no pre-training")
    ax.set_xticks(x, seeds)
    ax.set_xlabel("seed")
    ax.set_ylabel("ISE accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)
