"""Text tables and matplotlib figures for finished or running searches."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..searchspace import CELL_TYPES, EDGES, OpKind  # noqa: E402

OP_NAMES = [k.name for k in OpKind]
EDGE_LABELS = [f"{src}->{dst + 2}" for src, dst in EDGES]


def _softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def alpha_rows(alpha: dict[str, np.ndarray]) -> list[list]:
    """One row per (cell type, edge): softmax weights over the candidate ops."""
    rows = []
    for ct in CELL_TYPES:
        probs = _softmax(np.asarray(alpha[ct], dtype=np.float64))
        for e, (src, dst) in enumerate(EDGES):
            rows.append([ct, e, src, dst + 2] + [float(v) for v in probs[e]])
    return rows


def alpha_csv(alpha: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_type", "edge", "src", "dst"] + OP_NAMES)
    for row in alpha_rows(alpha):
        w.writerow(row[:4] + [f"{v:.6f}" for v in row[4:]])
    return buf.getvalue()


def alpha_text(alpha: dict[str, np.ndarray]) -> str:
    head = f"{'cell':<7}{'edge':>6} " + " ".join(f"{n[:10]:>10}" for n in OP_NAMES)
    lines = [head]
    for row in alpha_rows(alpha):
        lines.append(f"{row[0]:<7}{EDGE_LABELS[row[1]]:>6} " + " ".join(f"{v:>10.4f}" for v in row[4:]))
    return "\n".join(lines)


def plot_alpha(alpha: dict[str, np.ndarray], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(11, 5.5), sharey=True)
    for ax, ct in zip(axes, CELL_TYPES):
        probs = _softmax(np.asarray(alpha[ct], dtype=np.float64))
        im = ax.imshow(probs, cmap="viridis", aspect="auto", vmin=0.0)
        ax.set_title(f"{ct} cell")
        ax.set_xticks(range(len(OP_NAMES)))
        ax.set_xticklabels(OP_NAMES, rotation=60, ha="right", fontsize=8)
        ax.set_yticks(range(len(EDGE_LABELS)))
        ax.set_yticklabels(EDGE_LABELS, fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    axes[0].set_ylabel("edge (source -> node)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(history: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    ax = axes[0, 0]
    ax.plot(epochs, [r["train_loss"] for r in history], label="train")
    ax.plot(epochs, [r["val_loss"] for r in history], label="val")
    ax.set_ylabel("summed sub-graph loss")
    ax.legend()
    axes[0, 1].plot(epochs, [r["val_acc"] for r in history], color="C2")
    axes[0, 1].set_ylabel("val accuracy")
    ax = axes[1, 0]
    ax.plot(epochs, [r["tau"] for r in history], label="tau")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lambda"] for r in history], color="C3", label="lambda")
    ax2.plot(epochs, [r["drop_prob"] for r in history], color="C4", label="drop prob")
    ax.set_ylabel("tau")
    ax2.legend(loc="upper right", fontsize=8)
    ax = axes[1, 1]
    ax.step(epochs, [r["skip_count_normal"] for r in history], where="post", label="normal")
    ax.step(epochs, [r["skip_count_reduce"] for r in history], where="post", label="reduce")
    ax.set_ylabel("skip-connects in derived cell")
    ax.set_ylim(-0.5, 8.5)
    ax.legend()
    for a in axes.flat:
        a.set_xlabel("epoch")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
