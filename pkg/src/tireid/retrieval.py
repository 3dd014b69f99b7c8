"""Cosine similarity, full ranking, and Top-K candidate sets.

All rows are unit-normalized at ingestion, so similarity is a plain dot
product. Scores stay float32 end to end and ranking comparisons are exact
on those values; ties break by ascending gallery index so every ranking
is a total order and runs are bit-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError


@dataclass(frozen=True)
class RankedList:
    """Similarity-ordered gallery rows for one query."""

    query_index: int
    gallery_indices: np.ndarray  # int64, best first
    scores: np.ndarray  # float32, non-increasing

    def __len__(self) -> int:
        return int(self.gallery_indices.shape[0])

    def entries(self) -> list[tuple[int, float]]:
        return [
            (int(g), float(s)) for g, s in zip(self.gallery_indices, self.scores)
        ]


@dataclass(frozen=True)
class CandidateSet:
    """Prefix of a query's ranked list: the Top-K retrieval candidates."""

    query_index: int
    gallery_indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return int(self.gallery_indices.shape[0])


def similarity(query_row: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Dot-product scores of one query row against every gallery row."""
    q = np.asarray(query_row, dtype=np.float32)
    g = np.asarray(gallery, dtype=np.float32)
    if q.ndim != 1 or g.ndim != 2 or q.shape[0] != g.shape[1]:
        raise ValidationError(
            f"dimension mismatch: query has shape {q.shape}, gallery {g.shape}"
        )
    return g @ q


def rank_scores(query_index: int, scores: np.ndarray) -> RankedList:
    """Total-order ranking of a score vector (descending, ties by index)."""
    s = np.asarray(scores, dtype=np.float32)
    order = np.lexsort((np.arange(s.shape[0]), -s))
    return RankedList(
        query_index=query_index,
        gallery_indices=order.astype(np.int64),
        scores=s[order],
    )


def full_ranking(queries: np.ndarray, gallery: np.ndarray) -> list[RankedList]:
    """One RankedList per query row, over the whole gallery."""
    q = np.asarray(queries, dtype=np.float32)
    g = np.asarray(gallery, dtype=np.float32)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValidationError(
            f"dimension mismatch: queries {q.shape}, gallery {g.shape}"
        )
    scores = q @ g.T
    return [rank_scores(i, scores[i]) for i in range(q.shape[0])]


def top_k(
    query_index: int, queries: np.ndarray, gallery: np.ndarray, k: int
) -> CandidateSet:
    """K highest-scoring gallery rows for one query, exact tie-break included.

    Uses argpartition plus a tie-widening pass so the result always equals
    the full-sort-then-truncate reference. K larger than the gallery clamps.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    scores = similarity(np.asarray(queries, dtype=np.float32)[query_index], gallery)
    n = scores.shape[0]
    kk = min(k, n)
    if kk == n:
        ranked = rank_scores(query_index, scores)
        return CandidateSet(query_index, ranked.gallery_indices, ranked.scores)
    part = np.argpartition(-scores, kk - 1)
    kth = scores[part[kk - 1]]
    pool = np.flatnonzero(scores >= kth)
    order = pool[np.lexsort((pool, -scores[pool]))][:kk]
    return CandidateSet(
        query_index=query_index,
        gallery_indices=order.astype(np.int64),
        scores=scores[order],
    )


def candidate_prefix(ranking: RankedList, k: int) -> CandidateSet:
    """Candidate set as the first min(k, len) entries of an existing ranking."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    kk = min(k, len(ranking))
    return CandidateSet(
        query_index=ranking.query_index,
        gallery_indices=ranking.gallery_indices[:kk],
        scores=ranking.scores[:kk],
    )


def write_rankings_jsonl(
    rankings: list[RankedList], path: str | Path, truncate: int | None = None
) -> None:
    """Export rankings as JSON Lines, optionally truncated to the first N entries."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranking in rankings:
            pairs = ranking.entries()
            if truncate is not None:
                pairs = pairs[:truncate]
            obj = {
                "query_index": ranking.query_index,
                "ranking": [[g, s] for g, s in pairs],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_rankings_jsonl(path: str | Path) -> list[RankedList]:
    rankings: list[RankedList] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            pairs = obj["ranking"]
            rankings.append(
                RankedList(
                    query_index=int(obj["query_index"]),
                    gallery_indices=np.asarray([p[0] for p in pairs], dtype=np.int64),
                    scores=np.asarray([p[1] for p in pairs], dtype=np.float32),
                )
            )
    return rankings
