"""Matplotlib figures emitted next to the delimited outputs.

The training stage saves a loss-curve figure beside the loss CSV; the
calibration and evaluation stages save one precision-recall figure per
score field beside the score CSVs and the text report.
"""

from __future__ import annotations


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_loss_curves(history, path, title: str = "training loss") -> None:
    """Per-epoch reconstruction / KL / total losses on a log scale."""
    plt = _pyplot()
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.recon for h in history], label="reconstruction")
    if any(h.kl for h in history):
        ax.plot(epochs, [h.kl for h in history], label="kl")
        ax.plot(epochs, [h.total for h in history], label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (per volume)")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_pr_figure(curve, auprc_value: float, selected_threshold: float, path) -> None:
    """Recall-precision step plot with the selected operating point."""
    plt = _pyplot()
    recalls = [p.recall for p in curve.points]
    precisions = [p.precision for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.step(recalls, precisions, where="post", marker=".")
    chosen = min(
        curve.points,
        key=lambda p: abs(p.threshold - selected_threshold),
    )
    ax.plot([chosen.recall], [chosen.precision], "r*", markersize=12, label="max-F1 threshold")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"{curve.score_field} score, AUPRC = {auprc_value:.3f}")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
