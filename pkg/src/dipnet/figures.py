"""Report figures rendered to files next to the delimited outputs.

Every CLI report path emits its numbers as CSV/JSON first; these helpers
add a PNG rendering of the same data: training curves, the CMC curve,
ablation comparisons, and per-image part-attention overviews.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(path, records):
    """Loss components and retrieval metrics against the epoch axis."""
    epochs = [r["epoch"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "id_loss", "triplet_loss", "pe_loss", "pe_loss_transformed"):
        if any(key in r for r in records):
            axes[0].plot(epochs, [r.get(key, np.nan) for r in records], label=key)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[0].set_title("training losses")
    evals = [(r["epoch"], r["rank1"], r["map"]) for r in records if "rank1" in r]
    if evals:
        e, r1, mp = zip(*evals)
        axes[1].plot(e, r1, marker="o", label="rank-1")
        axes[1].plot(e, mp, marker="s", label="mAP")
        axes[1].set_ylim(0, 1.02)
        axes[1].legend(fontsize=8)
    axes[1].set_xlabel("epoch")
    axes[1].set_title("retrieval quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cmc_curve(path, cmc, title="CMC"):
    fig, ax = plt.subplots(figsize=(5, 4))
    ranks = np.arange(1, len(cmc) + 1)
    ax.plot(ranks, cmc, marker="o", markersize=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(path, rows, axis_name):
    """Grouped bars of rank-1 and mAP per swept configuration."""
    labels = [str(r["config"]) for r in rows]
    r1 = [r["rank1"] for r in rows]
    mp = [r["map"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 3, 4))
    ax.bar(x - 0.18, r1, width=0.36, label="rank-1")
    ax.bar(x + 0.18, mp, width=0.36, label="mAP")
    ax.set_xticks(x, labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"ablation: {axis_name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_part_overview(path, image, score_maps, positions, pred_positions, weights):
    """One panel per part: its score map plus markers on the input image."""
    M = len(score_maps)
    cols = M + 1
    fig, axes = plt.subplots(1, cols, figsize=(2.2 * cols, 4))
    axes = np.atleast_1d(axes)
    axes[0].imshow(np.clip(image, 0, 1))
    H, W = image.shape[:2]
    for k in range(M):
        px, py = positions[k]
        axes[0].plot(py * W - 0.5, px * H - 0.5, "r.", markersize=8)
        qx, qy = pred_positions[k]
        axes[0].plot(qy * W - 0.5, qx * H - 0.5, "c+", markersize=8)
    axes[0].set_title("constructed (.) vs predicted (+)", fontsize=7)
    axes[0].axis("off")
    for k in range(M):
        axes[k + 1].imshow(score_maps[k], cmap="viridis")
        axes[k + 1].set_title(f"part {k + 1}  w={weights[k]:.2f}", fontsize=8)
        axes[k + 1].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
