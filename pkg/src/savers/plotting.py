"""Matplotlib figures for the report bundle (PNG files, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# pin metadata so repeated renders are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_score_distribution(dist, path) -> Path:
    """Histogram of ``1 - p0`` for target/clutter chips with the target CDF."""
    fig, (ax_h, ax_c) = plt.subplots(1, 2, figsize=(9, 3.5))
    edges = dist.bin_edges
    centres = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    ax_h.bar(centres, dist.target_hist, width=width, alpha=0.7, label="target chips")
    ax_h.bar(centres, dist.clutter_hist, width=width, alpha=0.7, label="clutter chips")
    ax_h.set_xlabel("1 - p0")
    ax_h.set_ylabel("chips")
    ax_h.legend()
    if dist.target_values.size:
        ax_c.step(edges[1:], dist.cdf(edges[1:]), where="post")
    ax_c.set_xlabel("threshold t")
    ax_c.set_ylabel("P(1 - p0 <= t), targets")
    ax_c.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(cm, path) -> Path:
    fig, ax = plt.subplots(figsize=(1 + 0.55 * cm.num_classes, 0.8 + 0.5 * cm.num_classes))
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(cm.num_classes), cm.class_names, rotation=60, ha="right")
    ax.set_yticks(range(cm.num_classes), cm.class_names)
    ax.set_xlabel("actual")
    ax.set_ylabel("predicted")
    hi = cm.counts.max() if cm.counts.size else 0
    for (i, j), v in np.ndenumerate(cm.counts):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=7,
                color="white" if v > hi / 2 else "black")
    fig.tight_layout()
    return _save(fig, path)


def plot_cell_accuracy(acc_map: np.ndarray, path, title: str = "per-cell accuracy") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(acc_map, vmin=0, vmax=1, cmap="viridis")
    for (i, j), v in np.ndenumerate(acc_map):
        ax.text(j, i, f"{v:.3f}", ha="center", va="center", fontsize=7, color="white")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history: Sequence, path) -> Path:
    epochs = [r.epoch for r in history]
    fig, ax_l = plt.subplots(figsize=(5, 3.5))
    ax_l.plot(epochs, [r.mean_train_loss for r in history], "o-", color="C0")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("mean train loss", color="C0")
    ax_a = ax_l.twinx()
    ax_a.plot(epochs, [r.eval_accuracy for r in history], "s-", color="C1")
    ax_a.set_ylabel("eval coarse accuracy", color="C1")
    ax_a.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def save_rgb(image: np.ndarray, path) -> Path:
    """Write an ``[H, W, 3]`` float image in [0, 1] as PNG."""
    plt.imsave(Path(path), np.clip(image, 0.0, 1.0), metadata=_PNG_META)
    return Path(path)
