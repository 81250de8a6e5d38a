"""Figures written next to the CSV outputs: per-epoch curves and grid heatmaps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_LABELS = {"ndcg5": "NDCG@5", "ndcg10": "NDCG@10", "hr5": "HR@5", "hr10": "HR@10"}
# no Software/date stamps, so reruns give identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[dict], path) -> Path:
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_loss, ax_m) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax_loss.plot(epochs, [float(r["train_loss"]) for r in rows], "o-", color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss (BCE)")
    for key, label in _LABELS.items():
        pts = [(e, float(r[key])) for e, r in zip(epochs, rows) if r.get(key) not in (None, "")]
        if pts:
            ax_m.plot(*zip(*pts), "o-", label=label)
    ax_m.set_xlabel("epoch")
    ax_m.set_ylabel("metric")
    ax_m.set_ylim(0, 1)
    ax_m.legend(frameon=False, fontsize=8)
    for ax in (ax_loss, ax_m):
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    return _save(fig, path)


def plot_grid_heatmap(rows: Sequence[dict], metric: str, path) -> Path:
    """Heatmap of ``metric`` over initializer_range (rows) x mini_batch_size (cols).

    Failed cells are left blank.
    """
    sigmas = sorted({float(r["initializer_range"]) for r in rows})
    sizes = sorted({int(r["mini_batch_size"]) for r in rows})
    grid = np.full((len(sigmas), len(sizes)), np.nan)
    for r in rows:
        if r.get(metric) in (None, ""):
            continue
        grid[sigmas.index(float(r["initializer_range"])), sizes.index(int(r["mini_batch_size"]))] = float(r[metric])
    fig, ax = plt.subplots(figsize=(1.2 * len(sizes) + 2.5, 0.6 * len(sigmas) + 1.8))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    for i in range(len(sigmas)):
        for j in range(len(sizes)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_xticks(range(len(sizes)), [str(b) for b in sizes])
    ax.set_yticks(range(len(sigmas)), [f"{s:g}" for s in sigmas])
    ax.set_xlabel("mini_batch_size")
    ax.set_ylabel("initializer_range")
    ax.set_title(_LABELS.get(metric, metric))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
