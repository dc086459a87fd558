"""Figure rendering for the report paths of the CLI.

Every figure function takes data already computed elsewhere and writes one
PNG next to the delimited or JSON output it illustrates. The Agg backend is
forced so rendering works headless; PNGs carry no timestamps, so identical
inputs give identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .corpus import Corpus
from .metrics import EvalReport
from .trainer import LogRow

_DPI = 110


def fig_training_curves(log: list[LogRow], path) -> None:
    """Loss and learning-rate curves over optimizer steps."""
    steps = [row.step for row in log]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7.0, 5.0), sharex=True, height_ratios=[2, 1]
    )
    ax_loss.plot(steps, [row.loss for row in log], color="tab:blue", linewidth=1.2)
    ax_loss.set_ylabel("loss")
    ax_loss.grid(True, alpha=0.3)
    ax_lr.plot(steps, [row.lr for row in log], color="tab:orange", linewidth=1.2)
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("optimizer step")
    ax_lr.grid(True, alpha=0.3)
    fig.suptitle("Training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def fig_herbs_histogram(corpus: Corpus, path) -> None:
    """Distribution of prescription sizes across a corpus."""
    counts = [len(record.prescription) for record in corpus.records]
    lo, hi = min(counts), max(counts)
    bins = [edge - 0.5 for edge in range(lo, hi + 2)]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.hist(counts, bins=bins, color="tab:green", edgecolor="white")
    ax.set_xlabel("herbs per prescription")
    ax.set_ylabel("records")
    ax.set_title("Prescription size distribution")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def fig_eval_summary(report: EvalReport, path) -> None:
    """Set-overlap scores beside dosage error, model against baseline."""
    fig, (ax_set, ax_dose) = plt.subplots(1, 2, figsize=(8.0, 4.0))
    names = ["Precision", "Recall", "F1"]
    values = [report.precision, report.recall, report.f1]
    bars = ax_set.bar(names, values, color=["tab:blue", "tab:cyan", "tab:purple"])
    ax_set.set_ylim(0.0, 1.0)
    ax_set.set_title("Herb selection")
    ax_set.bar_label(bars, fmt="%.3f", padding=2)
    ax_set.grid(True, axis="y", alpha=0.3)

    if report.nmse is None or report.nmse_baseline is None:
        ax_dose.text(0.5, 0.5, "no matched herbs", ha="center", va="center")
        ax_dose.set_axis_off()
    else:
        bars = ax_dose.bar(
            ["model", "mean-dosage\nbaseline"],
            [report.nmse, report.nmse_baseline],
            color=["tab:blue", "tab:gray"],
        )
        ax_dose.set_title("Dosage error (NMSE)")
        ax_dose.bar_label(bars, fmt="%.4f", padding=2)
        ax_dose.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
