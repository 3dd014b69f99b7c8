"""Retrieval evaluation: CMC Rank-K, mAP, mINP, and top-1 similarity stats.

Per-query definitions over a full-gallery ranking with 1-based ranks:

* CMC@k: 1 iff any relevant item appears within the first k entries.
* AP: mean over relevant ranks r of (relevant items at ranks <= r) / r.
* INP: (number of relevant items) / (rank of the last relevant item);
  the inverse-negative-penalty convention used across the re-id
  literature. Both AP and INP land in (0, 1].

Aggregation is the unweighted mean over queries, summed in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .retrieval import RankedList


@dataclass(frozen=True)
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    mINP: float
    num_queries: int

    def to_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "mAP": self.mAP,
            "mINP": self.mINP,
            "num_queries": self.num_queries,
        }


@dataclass(frozen=True)
class Top1Histogram:
    """Per-bin counts of top-1 similarity, split by retrieval correctness."""

    bin_edges: np.ndarray
    correct_counts: np.ndarray
    incorrect_counts: np.ndarray

    @property
    def num_queries(self) -> int:
        return int(self.correct_counts.sum() + self.incorrect_counts.sum())


def _relevance_mask(ranking: RankedList, relevant: AbstractSet[int]) -> np.ndarray:
    if not relevant:
        raise ValidationError(
            f"query {ranking.query_index}: empty relevant set (exclude upstream)"
        )
    rel = np.fromiter(relevant, dtype=np.int64)
    return np.isin(ranking.gallery_indices, rel)


def cmc_at_k(ranking: RankedList, relevant: AbstractSet[int], k: int) -> int:
    """1 iff a relevant gallery index appears in the first k entries."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    mask = _relevance_mask(ranking, relevant)
    return int(mask[:k].any())


def average_precision(ranking: RankedList, relevant: AbstractSet[int]) -> float:
    mask = _relevance_mask(ranking, relevant)
    hits = np.flatnonzero(mask)
    if hits.size == 0:
        raise ValidationError(
            f"query {ranking.query_index}: no relevant item present in ranking"
        )
    ranks = hits + 1  # 1-based
    precisions = np.arange(1, hits.size + 1, dtype=np.float64) / ranks
    return float(precisions.sum() / hits.size)


def inverse_negative_penalty(ranking: RankedList, relevant: AbstractSet[int]) -> float:
    mask = _relevance_mask(ranking, relevant)
    hits = np.flatnonzero(mask)
    if hits.size == 0:
        raise ValidationError(
            f"query {ranking.query_index}: no relevant item present in ranking"
        )
    hardest_rank = int(hits[-1]) + 1
    return float(hits.size / hardest_rank)


def evaluate(
    rankings: Sequence[RankedList],
    relevant_sets: Mapping[int, AbstractSet[int]],
) -> EvalReport:
    """Mean CMC@{1,5,10}, mAP, and mINP over all queries."""
    if not rankings:
        raise ValidationError("no rankings to evaluate")
    missing = [r.query_index for r in rankings if r.query_index not in relevant_sets]
    if missing:
        raise ValidationError(f"queries without relevance judgments: {missing}")
    empty = [r.query_index for r in rankings if not relevant_sets[r.query_index]]
    if empty:
        raise ValidationError(f"queries with empty relevant sets: {empty}")

    c1 = np.zeros(len(rankings))
    c5 = np.zeros(len(rankings))
    c10 = np.zeros(len(rankings))
    ap = np.zeros(len(rankings))
    inp = np.zeros(len(rankings))
    for i, ranking in enumerate(rankings):
        relevant = relevant_sets[ranking.query_index]
        c1[i] = cmc_at_k(ranking, relevant, 1)
        c5[i] = cmc_at_k(ranking, relevant, 5)
        c10[i] = cmc_at_k(ranking, relevant, 10)
        ap[i] = average_precision(ranking, relevant)
        inp[i] = inverse_negative_penalty(ranking, relevant)
    return EvalReport(
        rank1=float(c1.mean()),
        rank5=float(c5.mean()),
        rank10=float(c10.mean()),
        mAP=float(ap.mean()),
        mINP=float(inp.mean()),
        num_queries=len(rankings),
    )


def top1_similarity_stats(
    rankings: Sequence[RankedList],
    relevant_sets: Mapping[int, AbstractSet[int]],
    bin_edges: Sequence[float],
) -> Top1Histogram:
    """Bin each query's top-1 (score, correctness); out-of-span scores land
    in the boundary bins."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise ValidationError("bin_edges needs at least two values")
    if np.any(np.diff(edges) <= 0):
        raise ValidationError("bin_edges must be strictly ascending")
    nbins = edges.size - 1
    correct = np.zeros(nbins, dtype=np.int64)
    incorrect = np.zeros(nbins, dtype=np.int64)
    for ranking in rankings:
        relevant = relevant_sets[ranking.query_index]
        if not relevant:
            raise ValidationError(f"query {ranking.query_index}: empty relevant set")
        score = float(ranking.scores[0])
        bin_idx = int(np.clip(np.searchsorted(edges, score, side="right") - 1, 0, nbins - 1))
        if int(ranking.gallery_indices[0]) in relevant:
            correct[bin_idx] += 1
        else:
            incorrect[bin_idx] += 1
    return Top1Histogram(bin_edges=edges, correct_counts=correct, incorrect_counts=incorrect)


def mean_top1_by_correctness(
    rankings: Sequence[RankedList],
    relevant_sets: Mapping[int, AbstractSet[int]],
) -> tuple[float | None, float | None]:
    """Mean top-1 similarity of correctly vs incorrectly retrieved queries."""
    correct: list[float] = []
    incorrect: list[float] = []
    for ranking in rankings:
        relevant = relevant_sets[ranking.query_index]
        score = float(ranking.scores[0])
        if int(ranking.gallery_indices[0]) in relevant:
            correct.append(score)
        else:
            incorrect.append(score)
    mean_c = float(np.mean(correct)) if correct else None
    mean_i = float(np.mean(incorrect)) if incorrect else None
    return mean_c, mean_i


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )


def write_histogram_csv(hist: Top1Histogram, path: str | Path) -> None:
    lines = ["bin_lo,bin_hi,correct,incorrect"]
    for i in range(hist.correct_counts.size):
        lines.append(
            f"{float(hist.bin_edges[i])!r},{float(hist.bin_edges[i + 1])!r},"
            f"{int(hist.correct_counts[i])},{int(hist.incorrect_counts[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
