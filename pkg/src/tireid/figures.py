"""Matplotlib renderings written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport, Top1Histogram


def render_top1_histogram(hist: Top1Histogram, path: str | Path) -> None:
    """Correct vs incorrect top-1 retrievals per similarity bin."""
    centers = (hist.bin_edges[:-1] + hist.bin_edges[1:]) / 2.0
    width = (hist.bin_edges[1:] - hist.bin_edges[:-1]) * 0.42
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers - width / 2, hist.correct_counts, width=width, label="correct",
           color="tab:green")
    ax.bar(centers + width / 2, hist.incorrect_counts, width=width, label="incorrect",
           color="tab:red")
    ax.set_xlabel("top-1 similarity")
    ax.set_ylabel("queries")
    ax.set_title("Top-1 similarity vs retrieval correctness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report(report: EvalReport, path: str | Path) -> None:
    """Single-report metric bars."""
    names = ["rank1", "rank5", "rank10", "mAP", "mINP"]
    values = [report.rank1, report.rank5, report.rank10, report.mAP, report.mINP]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"Evaluation over {report.num_queries} queries")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_comparison(
    before: EvalReport, after: EvalReport, path: str | Path
) -> None:
    """Baseline vs re-ranked bars for each evaluation metric."""
    names = ["rank1", "rank5", "rank10", "mAP", "mINP"]
    b = [before.rank1, before.rank5, before.rank10, before.mAP, before.mINP]
    a = [after.rank1, after.rank5, after.rank10, after.mAP, after.mINP]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([i - 0.2 for i in x], b, width=0.4, label="baseline", color="tab:blue")
    ax.bar([i + 0.2 for i in x], a, width=0.4, label="re-ranked", color="tab:orange")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"Re-ranking effect over {before.num_queries} queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
