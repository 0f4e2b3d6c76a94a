"""Figures written next to the CSV/JSON outputs of ``train`` and ``eval``."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
# PNG metadata without a timestamp keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_training(rows, path) -> Path:
    """Loss and temperature per optimizer step, one line per stage label."""
    stages: dict[str, list[tuple]] = {}
    for epoch, step, stage, loss, tau, lr in rows:
        stages.setdefault(str(stage), []).append((step, loss, tau))
    with plt.rc_context(RC):
        fig, (ax_loss, ax_tau) = plt.subplots(1, 2, figsize=(8, 3))
        for stage, pts in stages.items():
            steps = [p[0] for p in pts]
            ax_loss.plot(steps, [p[1] for p in pts], lw=1, label=f"stage {stage}")
            ax_tau.plot(steps, [p[2] for p in pts], lw=1, label=f"stage {stage}")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("contrastive loss")
        ax_tau.set_xlabel("step")
        ax_tau.set_ylabel("temperature")
        ax_tau.set_yscale("log")
        ax_loss.legend(frameon=False)
        return _save(fig, path)


def plot_report(report, path) -> Path:
    """Per-class scores at the smallest k, overall scores at every k.

    Linear-probe reports get a third panel with the training loss curve.
    """
    curve = report.extra.get("train_loss") if report.extra else None
    ncols = 3 if curve else 2
    kmin = min(report.ks)
    metric = "recall" if report.protocol.startswith("retrieval") else "top"
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3))
        per = report.per_class[kmin]
        classes = sorted(per)
        axes[0].bar([str(c) for c in classes], [per[c] for c in classes], color="0.45")
        axes[0].set_ylim(0, 1.05)
        axes[0].set_xlabel("class")
        axes[0].set_ylabel(f"{metric}@{kmin}")
        axes[1].plot(report.ks, [report.overall[k] for k in report.ks], "o-", color="k", lw=1)
        axes[1].set_xticks(report.ks)
        axes[1].set_ylim(0, 1.05)
        axes[1].set_xlabel("k")
        axes[1].set_ylabel(f"{metric}@k")
        if curve:
            axes[2].plot(range(len(curve)), curve, color="k", lw=1)
            axes[2].set_xlabel("probe epoch")
            axes[2].set_ylabel("train cross-entropy")
        fig.suptitle(report.protocol)
        return _save(fig, path)
