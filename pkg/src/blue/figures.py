"""Report figures, rendered straight to image files.

The Agg backend is forced before pyplot loads so everything works headless;
every function writes one file and returns its path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Training and validation loss curves; history rows have epoch/losses."""
    epochs = [row.epoch for row in history]
    train = [row.train_loss for row in history]
    val = [row.val_loss for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train, marker="o", label="train")
    if any(v is not None for v in val):
        ax.plot(epochs, val, marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction loss")
    ax.set_title("pretraining loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_trajectories(trajs, path, max_trajs: int = 12) -> Path:
    """Lon/lat traces of the first few trajectories."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for traj in trajs[:max_trajs]:
        coords = traj.coords()
        ax.plot(coords[:, 0], coords[:, 1], linewidth=0.8, alpha=0.8)
        ax.plot(coords[0, 0], coords[0, 1], "k.", markersize=3)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(f"trajectory sample (n={min(len(trajs), max_trajs)})")
    ax.ticklabel_format(useOffset=False)
    return _finish(fig, path)


def plot_level_lengths(level_lengths: Sequence[Sequence[int]], labels: Sequence[str], path) -> Path:
    """Mean sequence length per pyramid level, one bar each."""
    arr = np.asarray(level_lengths, dtype=np.float64)
    means = arr.mean(axis=0)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(range(len(means)), means, color="tab:blue", alpha=0.85)
    ax.set_xticks(range(len(means)), labels)
    ax.set_ylabel("mean sequence length")
    ax.set_title("coarsening across pyramid levels")
    for i, m in enumerate(means):
        ax.text(i, m, f"{m:.1f}", ha="center", va="bottom")
    return _finish(fig, path)


def plot_rank_histogram(ranks, path) -> Path:
    ranks = np.asarray(ranks)
    fig, ax = plt.subplots(figsize=(6, 4))
    upper = max(int(ranks.max()), 10)
    ax.hist(ranks, bins=min(50, upper), color="tab:purple", alpha=0.85)
    ax.set_xlabel("rank of the true match")
    ax.set_ylabel("queries")
    ax.set_title(f"retrieval ranks (mean {ranks.mean():.1f})")
    return _finish(fig, path)


def plot_duration_scatter(true, pred, path) -> Path:
    true = np.asarray(true)
    pred = np.asarray(pred)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(true, pred, s=12, alpha=0.6)
    lim = [0, max(float(true.max()), float(pred.max())) * 1.05]
    ax.plot(lim, lim, "k--", linewidth=0.8)
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    ax.set_xlabel("actual duration (s)")
    ax.set_ylabel("predicted duration (s)")
    ax.set_title("travel-time estimation")
    return _finish(fig, path)


def plot_confusion(true, pred, n_classes: int, path) -> Path:
    true = np.asarray(true)
    pred = np.asarray(pred)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true, pred):
        counts[t, p] += 1
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(counts, cmap="Blues")
    for i in range(n_classes):
        for j in range(n_classes):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("actual class")
    ax.set_title("confusion matrix")
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _finish(fig, path)


def plot_embedding_scatter(embeddings: np.ndarray, labels: Optional[np.ndarray], path) -> Path:
    """Embeddings projected onto their two leading principal components."""
    x = np.asarray(embeddings, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T if vt.shape[0] >= 2 else np.c_[centered @ vt[0], np.zeros(len(x))]
    fig, ax = plt.subplots(figsize=(6, 5))
    if labels is not None:
        for lab in np.unique(labels):
            sel = labels == lab
            ax.scatter(proj[sel, 0], proj[sel, 1], s=14, alpha=0.7, label=f"class {lab}")
        ax.legend()
    else:
        ax.scatter(proj[:, 0], proj[:, 1], s=14, alpha=0.7)
    ax.set_xlabel("principal component 1")
    ax.set_ylabel("principal component 2")
    ax.set_title("trajectory embeddings")
    return _finish(fig, path)
