"""Multi-round oracle interaction and fusion re-ranking.

Per query, the loop examines the Top-K retrieval candidates with the
oracle, at most one candidate per round, under two gating branches:

* high-similarity queries (top-1 score strictly above the threshold) get a
  single round-1 localization; a Yes refines on candidate 1, a No ends the
  query immediately since no later branch can fire;
* low-similarity queries scan candidates in rank order and refine on the
  first Yes arriving at round k > 1, provided every earlier verdict was
  No. A Yes already at round 1 can never satisfy the later branch, so the
  scan stops without refinement.

A refined query's scores are fused with the baseline as
``lam * S + (1 - lam) * S_bar`` where ``S_bar`` is the refined-query score
vector with the anchor pinned to 1. Queries that never refine keep their
baseline ranking bit for bit. Sessions are independent and run under a
bounded thread pool; results merge by query index so concurrency never
changes output bytes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, relevant_galleries
from .embedder import EmbeddingSource
from .errors import OracleError, ValidationError
from .metrics import EvalReport, evaluate
from .oracle import OracleBackend, RefinedQuery
from .retrieval import CandidateSet, RankedList, candidate_prefix, full_ranking, rank_scores


class SessionStatus(str, Enum):
    PENDING_ROUND1 = "pending_round1"
    AWAITING_LOW_SIM_ANCHOR = "awaiting_low_sim_anchor"
    REFINED = "refined"
    EXHAUSTED_NO_REFINEMENT = "exhausted_no_refinement"
    SKIPPED_HIGH_SIM_NO = "skipped_high_sim_no"


@dataclass
class ThiConfig:
    """Interaction settings: rounds K, similarity threshold, fusion weight.

    ``candidate_size`` defaults to ``rounds`` (one candidate examined per
    round). ``pin_literal_top1`` pins the baseline top-1 candidate in the
    fusion instead of the located anchor; ``unconditional_localization``
    runs all K localization rounds without the efficiency gating. Both
    exist for A/B comparison and are off by default.
    """

    rounds: int = 5
    similarity_threshold: float = 0.55
    fusion_weight: float = 0.8
    candidate_size: int | None = None
    max_inflight_oracle_calls: int = 4
    pin_literal_top1: bool = False
    unconditional_localization: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ValidationError("fusion_weight must be in [0, 1]")
        if self.candidate_size is None:
            self.candidate_size = self.rounds
        if self.candidate_size < self.rounds:
            raise ValidationError("candidate_size must be >= rounds")
        if self.max_inflight_oracle_calls < 1:
            raise ValidationError("max_inflight_oracle_calls must be >= 1")


@dataclass
class SessionOutcome:
    """What one query's interaction produced, before fusion."""

    query_index: int
    status: SessionStatus
    verdicts: list[bool] = field(default_factory=list)
    refined: bool = False
    anchor_gallery_index: int | None = None
    refinement: RefinedQuery | None = None
    oracle_calls: int = 0
    error: str | None = None


@dataclass
class TraceEntry:
    """One audit line per query, exported as JSON Lines."""

    query_index: int
    status: str
    rounds_executed: int
    verdicts: list[str]
    refined: bool
    anchor_gallery_index: int | None
    refined_provenance: str | None
    oracle_calls: int
    error: str | None
    baseline_gt_rank: int | None
    fused_gt_rank: int | None

    def to_dict(self) -> dict:
        return {
            "query_index": self.query_index,
            "status": self.status,
            "rounds_executed": self.rounds_executed,
            "verdicts": self.verdicts,
            "refined": self.refined,
            "anchor_gallery_index": self.anchor_gallery_index,
            "refined_provenance": self.refined_provenance,
            "oracle_calls": self.oracle_calls,
            "error": self.error,
            "baseline_gt_rank": self.baseline_gt_rank,
            "fused_gt_rank": self.fused_gt_rank,
        }


@dataclass
class ReRankedResult:
    query_index: int
    fused_scores: np.ndarray
    fused_ranking: RankedList


@dataclass
class BatchResult:
    reranked: list[ReRankedResult]
    traces: list[TraceEntry]
    report_before: EvalReport
    report_after: EvalReport
    baseline_rankings: list[RankedList]
    total_oracle_calls: int
    refined_count: int


def fuse(
    baseline_scores: np.ndarray,
    refined_scores: np.ndarray,
    anchor_index: int,
    lam: float,
) -> np.ndarray:
    """lam * S + (1 - lam) * S_bar with S_bar pinned to 1 at the anchor.

    lam = 1 returns the baseline unchanged (exact identity, preserved at
    the bit level).
    """
    s = np.asarray(baseline_scores, dtype=np.float32)
    s_ref = np.asarray(refined_scores, dtype=np.float32)
    if s.shape != s_ref.shape:
        raise ValidationError(
            f"score length mismatch: {s.shape} vs {s_ref.shape}"
        )
    if not 0 <= anchor_index < s.shape[0]:
        raise ValidationError(f"anchor index {anchor_index} out of range")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("lam must be in [0, 1]")
    if lam == 1.0:
        return s.copy()
    s_bar = s_ref.copy()
    s_bar[anchor_index] = np.float32(1.0)
    return np.float32(lam) * s + np.float32(1.0 - lam) * s_bar


def should_attempt_round(
    k: int,
    prior_verdicts: Sequence[bool],
    verdict_k: bool,
    top1_similarity: float,
    xi: float,
) -> bool:
    """The two refinement branches of the interaction loop.

    Round 1 refines only when the verdict is Yes and the top-1 similarity
    is strictly above xi; later rounds refine only when every prior
    verdict was No, the current one is Yes, and the top-1 similarity is at
    most xi.
    """
    if verdict_k and k == 1 and top1_similarity > xi:
        return True
    if (
        verdict_k
        and k > 1
        and top1_similarity <= xi
        and not any(prior_verdicts[: k - 1])
    ):
        return True
    return False


def run_session(
    query,
    candidates: CandidateSet,
    images_by_row: Mapping[int, object],
    oracle: OracleBackend,
    config: ThiConfig,
) -> SessionOutcome:
    """Execute the interaction state machine for one query.

    Oracle failures abort the session: the status at the moment of failure
    is recorded and the query falls back to its baseline ranking.
    """
    out = SessionOutcome(
        query_index=candidates.query_index, status=SessionStatus.PENDING_ROUND1
    )
    if len(candidates) == 0:
        out.status = SessionStatus.EXHAUSTED_NO_REFINEMENT
        return out
    top1_sim = float(candidates.scores[0])
    xi = config.similarity_threshold
    examine = min(config.rounds, len(candidates))

    def _image(row: int):
        img = images_by_row.get(row)
        if img is None:
            raise ValidationError(f"gallery row {row} has no image record")
        return img

    def _refine(anchor_row: int) -> None:
        out.refinement = oracle.refine_query(query, _image(anchor_row))
        out.refined = True
        out.anchor_gallery_index = anchor_row
        out.status = SessionStatus.REFINED

    try:
        if config.unconditional_localization:
            for k in range(1, examine + 1):
                row = int(candidates.gallery_indices[k - 1])
                answer = oracle.localize(query, _image(row))
                out.verdicts.append(answer.verdict)
                if not out.refined and should_attempt_round(
                    k, out.verdicts, answer.verdict, top1_sim, xi
                ):
                    _refine(row)
                if not out.refined:
                    out.status = SessionStatus.AWAITING_LOW_SIM_ANCHOR
            if not out.refined:
                out.status = SessionStatus.EXHAUSTED_NO_REFINEMENT
        elif top1_sim > xi:
            row = int(candidates.gallery_indices[0])
            answer = oracle.localize(query, _image(row))
            out.verdicts.append(answer.verdict)
            if answer.verdict:
                _refine(row)
            else:
                out.status = SessionStatus.SKIPPED_HIGH_SIM_NO
        else:
            for k in range(1, examine + 1):
                row = int(candidates.gallery_indices[k - 1])
                answer = oracle.localize(query, _image(row))
                out.verdicts.append(answer.verdict)
                if answer.verdict:
                    if k == 1:
                        # A round-1 Yes on a low-similarity query can never
                        # refine: the later branch needs all-No history.
                        out.status = SessionStatus.EXHAUSTED_NO_REFINEMENT
                    else:
                        _refine(row)
                    break
                out.status = SessionStatus.AWAITING_LOW_SIM_ANCHOR
            if not out.refined and out.status is not SessionStatus.EXHAUSTED_NO_REFINEMENT:
                if len(out.verdicts) == examine and not any(out.verdicts):
                    out.status = SessionStatus.EXHAUSTED_NO_REFINEMENT
    except (OracleError, ValidationError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
        out.refined = False
        out.refinement = None
    out.oracle_calls = len(out.verdicts) + (
        oracle.refinement_call_cost if out.refined else 0
    )
    return out


def _gt_rank(ranking: RankedList, relevant: frozenset[int]) -> int | None:
    mask = np.isin(ranking.gallery_indices, np.fromiter(relevant, dtype=np.int64))
    hits = np.flatnonzero(mask)
    return int(hits[0]) + 1 if hits.size else None


def median_top1_similarity(rankings: Sequence[RankedList]) -> float:
    return float(np.median([float(r.scores[0]) for r in rankings]))


def run_batch(
    corpus: Corpus,
    text_matrix: np.ndarray,
    image_matrix: np.ndarray,
    oracle: OracleBackend,
    config: ThiConfig,
    embedding_source: EmbeddingSource | None = None,
    baseline_rankings: list[RankedList] | None = None,
) -> BatchResult:
    """Interact, fuse, and evaluate every query in the corpus.

    Emits fused rankings, a per-query trace, and before/after evaluation
    reports. Per-query failures (oracle errors, missing refined
    embeddings) degrade that query to its baseline ranking and are counted
    in the trace.
    """
    judgments = relevant_galleries(corpus)
    images_by_row = corpus.images_by_row()
    texts_by_row = corpus.texts_by_row()
    if len(images_by_row) != image_matrix.shape[0]:
        raise ValidationError(
            "interaction needs an image record for every gallery row "
            f"({len(images_by_row)} records, {image_matrix.shape[0]} rows)"
        )
    if oracle.refines_to_text and embedding_source is None:
        raise ValidationError(
            "text-refining backends need an embedding source "
            "(embedder endpoint or refined-embeddings file)"
        )

    query_rows = sorted(judgments)
    if baseline_rankings is None:
        baseline_rankings = full_ranking(text_matrix, image_matrix)
    baseline_by_row = {r.query_index: r for r in baseline_rankings}
    missing = [row for row in query_rows if row not in baseline_by_row]
    if missing:
        raise ValidationError(f"baseline rankings missing query rows: {missing}")

    def _one(row: int) -> tuple[SessionOutcome, np.ndarray | None]:
        query = texts_by_row[row]
        ranking = baseline_by_row[row]
        candidates = candidate_prefix(ranking, config.candidate_size)
        outcome = run_session(query, candidates, images_by_row, oracle, config)
        refined_scores: np.ndarray | None = None
        if outcome.refined and outcome.refinement is not None:
            refinement = outcome.refinement
            if refinement.refined_embedding is not None:
                refined_scores = image_matrix @ refinement.refined_embedding
            else:
                try:
                    vec = embedding_source.embedding_for(
                        query, refinement.refined_text
                    )
                    refined_scores = (image_matrix @ vec).astype(np.float32)
                except (OracleError, ValidationError) as exc:
                    outcome.error = f"{type(exc).__name__}: {exc}"
                    refined_scores = None
        return outcome, refined_scores

    with ThreadPoolExecutor(max_workers=config.max_inflight_oracle_calls) as pool:
        results = list(pool.map(_one, query_rows))

    reranked: list[ReRankedResult] = []
    traces: list[TraceEntry] = []
    fused_rankings: list[RankedList] = []
    total_calls = 0
    refined_count = 0
    for row, (outcome, refined_scores) in zip(query_rows, results):
        ranking = baseline_by_row[row]
        baseline_scores = _scores_by_gallery(ranking, image_matrix.shape[0])
        if outcome.refined and refined_scores is not None:
            pinned = (
                int(ranking.gallery_indices[0])
                if config.pin_literal_top1
                else outcome.anchor_gallery_index
            )
            fused_scores = fuse(
                baseline_scores, refined_scores, pinned, config.fusion_weight
            )
            fused_ranking = rank_scores(row, fused_scores)
            refined_count += 1
        else:
            fused_scores = baseline_scores
            fused_ranking = ranking
        reranked.append(
            ReRankedResult(
                query_index=row, fused_scores=fused_scores, fused_ranking=fused_ranking
            )
        )
        fused_rankings.append(fused_ranking)
        total_calls += outcome.oracle_calls
        relevant = judgments[row]
        traces.append(
            TraceEntry(
                query_index=row,
                status=outcome.status.value,
                rounds_executed=len(outcome.verdicts),
                verdicts=["yes" if v else "no" for v in outcome.verdicts],
                refined=outcome.refined,
                anchor_gallery_index=outcome.anchor_gallery_index,
                refined_provenance=(
                    outcome.refinement.provenance if outcome.refinement else None
                ),
                oracle_calls=outcome.oracle_calls,
                error=outcome.error,
                baseline_gt_rank=_gt_rank(ranking, relevant),
                fused_gt_rank=_gt_rank(fused_ranking, relevant),
            )
        )

    baseline_subset = [baseline_by_row[row] for row in query_rows]
    report_before = evaluate(baseline_subset, judgments)
    report_after = evaluate(fused_rankings, judgments)
    return BatchResult(
        reranked=reranked,
        traces=traces,
        report_before=report_before,
        report_after=report_after,
        baseline_rankings=baseline_subset,
        total_oracle_calls=total_calls,
        refined_count=refined_count,
    )


def _scores_by_gallery(ranking: RankedList, gallery_size: int) -> np.ndarray:
    """Invert a RankedList back to a gallery-ordered score vector."""
    if len(ranking) != gallery_size:
        raise ValidationError(
            f"query {ranking.query_index}: ranking covers {len(ranking)} of "
            f"{gallery_size} gallery rows; fusion needs full rankings"
        )
    scores = np.empty(gallery_size, dtype=np.float32)
    scores[ranking.gallery_indices] = ranking.scores
    return scores


def write_trace_jsonl(traces: Sequence[TraceEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in traces:
            fh.write(json.dumps(entry.to_dict(), separators=(",", ":")) + "\n")
