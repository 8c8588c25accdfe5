"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(curves: list[dict], path, keys=("total", "l1", "gan", "vel"), title: str = "") -> Path:
    """Per-epoch means of the logged loss components, one panel per key present."""
    keys = [k for k in keys if curves and k in curves[0]]
    epochs = sorted({c["epoch"] for c in curves})
    fig, axes = plt.subplots(1, max(len(keys), 1), figsize=(3.2 * max(len(keys), 1), 2.8), squeeze=False)
    for ax, key in zip(axes[0], keys):
        means = [np.mean([c[key] for c in curves if c["epoch"] == e]) for e in epochs]
        ax.plot(epochs, means, marker="o", ms=3)
        ax.set_title(key)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_emd_bars(result, path) -> Path:
    """Valence and arousal EMD per (subject, emotion) group with the overall means as lines."""
    labels = [f"{g.subject}/{g.emotion}" for g in result.groups]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(labels) + 2), 3.2))
    ax.bar(x - 0.2, [g.v_emd for g in result.groups], 0.4, label="valence")
    ax.bar(x + 0.2, [g.a_emd for g in result.groups], 0.4, label="arousal")
    ax.axhline(result.v_emd, color="C0", ls="--", lw=1)
    ax.axhline(result.a_emd, color="C1", ls="--", lw=1)
    ax.set_xticks(x, labels, rotation=45, ha="right")
    ax.set_ylabel("EMD")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
