import numpy as np
import pytest

from tireid.corpus import SyntheticBenchConfig, generate_synthetic_benchmark, relevant_galleries
from tireid.errors import ValidationError
from tireid.metrics import (
    average_precision,
    cmc_at_k,
    evaluate,
    inverse_negative_penalty,
    mean_top1_by_correctness,
    top1_similarity_stats,
    write_histogram_csv,
)
from tireid.retrieval import RankedList, full_ranking, rank_scores

# ---------------------------------------------------------------------------
# Brute-force references, deliberately written as plain loops independent of
# the implementation under test.
# ---------------------------------------------------------------------------


def ref_cmc(order, relevant, k):
    for g in order[:k]:
        if g in relevant:
            return 1
    return 0


def ref_ap(order, relevant):
    hits = 0
    total = 0.0
    for rank, g in enumerate(order, start=1):
        if g in relevant:
            hits += 1
            total += hits / rank
    return total / hits


def ref_inp(order, relevant):
    last = 0
    hits = 0
    for rank, g in enumerate(order, start=1):
        if g in relevant:
            hits += 1
            last = rank
    return hits / last


def make_ranking(order, query_index=0):
    n = len(order)
    scores = np.linspace(1.0, 0.0, n, dtype=np.float32)
    return RankedList(
        query_index=query_index,
        gallery_indices=np.asarray(order, dtype=np.int64),
        scores=scores,
    )


class TestHandValues:
    def test_relevant_at_rank1(self):
        r = make_ranking([5, 3, 1])
        assert cmc_at_k(r, {5}, 1) == 1
        assert average_precision(r, {5}) == 1.0

    def test_first_relevant_at_rank6(self):
        r = make_ranking([9, 8, 7, 6, 5, 0])
        assert cmc_at_k(r, {0}, 5) == 0
        assert cmc_at_k(r, {0}, 6) == 1

    def test_ap_ranks_2_and_5(self):
        r = make_ranking([9, 1, 8, 7, 2])
        assert average_precision(r, {1, 2}) == pytest.approx(0.45, abs=1e-12)

    def test_ap_all_relevant(self):
        r = make_ranking([3, 1, 0, 2])
        assert average_precision(r, {0, 1, 2, 3}) == 1.0

    def test_inp_ranks_2_and_5(self):
        r = make_ranking([9, 1, 8, 7, 2])
        assert inverse_negative_penalty(r, {1, 2}) == pytest.approx(0.4, abs=1e-12)

    def test_inp_perfect_prefix(self):
        r = make_ranking([4, 2, 9, 7])
        assert inverse_negative_penalty(r, {4, 2}) == 1.0

    def test_empty_relevant_rejected(self):
        r = make_ranking([0, 1])
        for fn in (lambda: cmc_at_k(r, set(), 1),
                   lambda: average_precision(r, set()),
                   lambda: inverse_negative_penalty(r, set())):
            with pytest.raises(ValidationError):
                fn()


class TestOracleEquivalence:
    def test_exhaustive_small_galleries(self):
        # every gallery size up to 8, every non-empty relevance pattern
        for g in range(1, 9):
            order = list(range(g))
            for mask in range(1, 2**g):
                relevant = {i for i in range(g) if mask >> i & 1}
                r = make_ranking(order)
                assert average_precision(r, relevant) == pytest.approx(
                    ref_ap(order, relevant), abs=1e-12
                )
                assert inverse_negative_penalty(r, relevant) == pytest.approx(
                    ref_inp(order, relevant), abs=1e-12
                )
                for k in range(1, g + 1):
                    assert cmc_at_k(r, relevant, k) == ref_cmc(order, relevant, k)

    def test_random_instances(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 51))
            order = rng.permutation(n).tolist()
            n_rel = int(rng.integers(1, n + 1))
            relevant = set(rng.choice(n, size=n_rel, replace=False).tolist())
            r = make_ranking(order)
            assert average_precision(r, relevant) == pytest.approx(
                ref_ap(order, relevant), abs=1e-12
            )
            assert inverse_negative_penalty(r, relevant) == pytest.approx(
                ref_inp(order, relevant), abs=1e-12
            )
            k = int(rng.integers(1, n + 1))
            assert cmc_at_k(r, relevant, k) == ref_cmc(order, relevant, k)

    def test_cmc_monotone_in_k(self, rng):
        order = rng.permutation(20).tolist()
        relevant = {3, 11}
        r = make_ranking(order)
        values = [cmc_at_k(r, relevant, k) for k in range(1, 21)]
        assert values == sorted(values)

    def test_metrics_in_unit_interval(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 30))
            order = rng.permutation(n).tolist()
            relevant = {int(rng.integers(0, n))}
            r = make_ranking(order)
            assert 0 < average_precision(r, relevant) <= 1
            assert 0 < inverse_negative_penalty(r, relevant) <= 1


class TestEvaluate:
    def test_mean_of_two_queries(self):
        r0 = make_ranking([0, 1, 2, 3, 4], query_index=0)  # relevant at rank 1
        r1 = make_ranking([9, 1, 8, 7, 2], query_index=1)  # AP 0.45
        report = evaluate([r0, r1], {0: {0}, 1: {1, 2}})
        assert report.mAP == pytest.approx((1.0 + 0.45) / 2, abs=1e-12)
        assert report.num_queries == 2

    def test_duplicate_queries_identical_report(self):
        r = make_ranking([2, 0, 1], query_index=0)
        rel = {0: {0}}
        a = evaluate([r], rel)
        b = evaluate([r, RankedList(0, r.gallery_indices, r.scores)], rel)
        assert a.rank1 == b.rank1 and a.mAP == b.mAP and a.mINP == b.mINP

    def test_rank_ordering_invariant(self):
        r = make_ranking([5, 0, 1, 2, 3, 4, 6, 7, 8, 9, 10], query_index=0)
        report = evaluate([r], {0: {4}})  # relevant sits at rank 6
        assert report.rank1 <= report.rank5 <= report.rank10
        assert (report.rank1, report.rank5, report.rank10) == (0.0, 0.0, 1.0)

    def test_query_without_judgment_rejected(self):
        r = make_ranking([0, 1], query_index=3)
        with pytest.raises(ValidationError, match="3"):
            evaluate([r], {0: {0}})

    def test_empty_relevant_set_listed(self):
        r = make_ranking([0, 1], query_index=7)
        with pytest.raises(ValidationError, match="7"):
            evaluate([r], {7: set()})


class TestTop1Stats:
    def test_all_correct_no_incorrect_counts(self):
        rankings = [make_ranking([0, 1], query_index=i) for i in range(4)]
        hist = top1_similarity_stats(rankings, {i: {0} for i in range(4)},
                                     [0.0, 0.5, 1.0])
        assert hist.incorrect_counts.sum() == 0
        assert hist.num_queries == 4

    def test_counts_conserved_and_boundary_bins(self, rng):
        rankings = []
        judgments = {}
        for i in range(30):
            scores = rng.standard_normal(10).astype(np.float32) * 2.0
            rankings.append(rank_scores(i, scores))
            judgments[i] = {int(rng.integers(0, 10))}
        hist = top1_similarity_stats(rankings, judgments, [0.4, 0.5, 0.6])
        assert hist.num_queries == 30

    def test_edges_must_ascend(self):
        with pytest.raises(ValidationError):
            top1_similarity_stats([], {}, [0.5, 0.5])

    def test_synthetic_separation_with_signal(self):
        # calibrated noise level: similarity carries signal, so correct
        # top-1 retrievals score higher on average than incorrect ones
        cfg = SyntheticBenchConfig(60, 2, 1, 64, 0.18, 3)
        corpus, img, txt = generate_synthetic_benchmark(cfg)
        rankings = full_ranking(txt, img)
        judgments = relevant_galleries(corpus)
        mean_c, mean_i = mean_top1_by_correctness(rankings, judgments)
        assert mean_c is not None and mean_i is not None
        assert mean_c > mean_i

    def test_csv_export(self, tmp_path):
        rankings = [make_ranking([0, 1], query_index=0)]
        hist = top1_similarity_stats(rankings, {0: {0}}, [0.0, 0.5, 1.0])
        path = tmp_path / "h.csv"
        write_histogram_csv(hist, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,correct,incorrect"
        assert len(lines) == 3
