"""SVG figures: PR/ROC curves of a report and the transfer-sweep scatter."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# reproducible element ids so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "fundus-forge"
plt.rcParams["svg.fonttype"] = "path"

# (from scratch, pretrained): bright and dark shades of one hue per architecture
ARCH_COLOURS = {
    "unet": ("#7fb8ff", "#0b3d91"),
    "enet": ("#ffb27a", "#8c3a00"),
    "fcdn56": ("#9be39b", "#1d6b1d"),
    "fcdn67": ("#d9a6f2", "#5b1f7a"),
    "fcdn103": ("#f2e27a", "#7a6a00"),
}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def curves_figure(report, path) -> None:
    fig, (ax_pr, ax_roc) = plt.subplots(1, 2, figsize=(9, 4))
    c = report.pooled
    ax_pr.plot(c.recall, c.precision, lw=1.5)
    ax_pr.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02),
              title=f"PR (AUC {c.auc_pr:.4f})")
    if c.fpr is not None:
        ax_roc.plot(c.fpr, c.tpr, lw=1.5)
    ax_roc.plot([0, 1], [0, 1], ls=":", color="grey", lw=1)
    ax_roc.set(xlabel="False positive rate", ylabel="True positive rate", xlim=(0, 1), ylim=(0, 1.02),
               title=f"ROC (AUC {c.auc_roc:.4f})")
    fig.suptitle(report.model or "evaluation")
    fig.tight_layout()
    _save(fig, path)


def sweep_scatter(rows: Sequence[dict], path, title: str = "synthetic validation sets") -> None:
    """AUC-PR against images presented; marker area grows with training-set size."""
    fig, ax = plt.subplots(figsize=(7, 5))
    done = [r for r in rows if r["status"] == "ok"]
    groups = sorted({(r["arch"], r["init"]) for r in done})
    for arch, init in groups:
        pts = [r for r in done if r["arch"] == arch and r["init"] == init]
        bright, dark = ARCH_COLOURS.get(arch, ("#bbbbbb", "#333333"))
        ax.scatter(
            [r["images_presented"] for r in pts], [r["auc_pr"] for r in pts],
            s=[20 + 12 * r["train_size"] for r in pts],
            color=dark if init == "MP" else bright, edgecolors="black", linewidths=0.4, alpha=0.9,
            label=f"{arch} {init}",
        )
    ax.set_xscale("log")
    ax.set_xlabel("Images presented during training")
    ax.set_ylabel("AUC-PR")
    ax.set_title(title)
    if groups:
        ax.legend(fontsize=8, loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
