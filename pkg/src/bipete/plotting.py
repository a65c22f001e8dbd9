"""Static SVG figures: ROC / PR curves per configuration and training curves per fold."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import metrics  # noqa: E402

# fixed ids and no timestamp so re-runs produce identical files
matplotlib.rcParams["svg.hashsalt"] = "bipete"
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, tuple], path: str | Path) -> Path:
    """``curves`` maps a label to (scores, labels)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (s, y) in curves.items():
        fpr, tpr = metrics.roc_curve(s, y)
        ax.plot(fpr, tpr, label=f"{name} (AUROC {metrics.auroc(s, y):.3f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set(xlabel="False positive rate", ylabel="True positive rate", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_pr(curves: Mapping[str, tuple], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (s, y) in curves.items():
        rec, prec = metrics.pr_curve(s, y)
        ax.step([0.0, *rec], [prec[0], *prec], where="pre", label=f"{name} (AUPRC {metrics.auprc(s, y):.3f})")
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path)


def plot_training_curves(runlogs: Sequence, path: str | Path, title: str = "") -> Path:
    """Train and validation loss per epoch, one line pair per fold."""
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(10, 4))
    for i, rl in enumerate(runlogs):
        ep = rl.column("epoch")
        c = f"C{i % 10}"
        ax_loss.plot(ep, rl.column("train_loss"), color=c, lw=1, ls="--")
        ax_loss.plot(ep, rl.column("val_loss"), color=c, lw=1.5, label=f"fold {i}")
        auc = [v if v is not None else float("nan") for v in rl.column("val_auroc")]
        ax_auc.plot(ep, auc, color=c, lw=1.5)
    ax_loss.set(xlabel="Epoch", ylabel="Loss (dashed: train, solid: val)")
    ax_auc.set(xlabel="Epoch", ylabel="Validation AUROC")
    ax_loss.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)
