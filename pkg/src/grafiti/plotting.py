"""Report figures rendered to files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curves(rows: Sequence[dict], path) -> Path:
    """Train/validation MSE per epoch, one line pair per fold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    folds = sorted({r["fold"] for r in rows})
    for k in folds:
        mine = [r for r in rows if r["fold"] == k]
        epochs = [r["epoch"] for r in mine]
        line = ax.plot(epochs, [r["train_mse"] for r in mine], label=f"fold {k} train")[0]
        ax.plot(epochs, [r["val_mse"] for r in mine], "--", color=line.get_color(), label=f"fold {k} validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_scaling(rows: Sequence[dict], path) -> Path:
    """Log-log wall time against edge count with a linear reference."""
    edges = [r["edges"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("forward_s", "forward"), ("forward_backward_s", "forward + backward"), ("layer_s", "one layer")):
        ax.loglog(edges, [r[key] for r in rows], "o-", label=label)
    ref = [rows[0]["layer_s"] * e / edges[0] for e in edges]
    ax.loglog(edges, ref, "k:", label="linear in |E|")
    ax.set_xlabel("edges per batch")
    ax.set_ylabel("seconds")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
