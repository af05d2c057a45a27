import itertools
import math

import numpy as np
import pytest

from implicitce.core.errors import MetricError
from implicitce.models.config import MetricConfig
from implicitce.models.enums import SimilarityKind, Split
from implicitce.services.metrics import (
    err,
    evaluate,
    ndcg,
    quantize_grades,
    rank_order,
    recall_at_k,
    relevant_items,
    summarize,
)
from implicitce.services.model import init_params


def _ndcg_oracle(scores, truth):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    dcg = sum(truth[j] / math.log2(r + 2) for r, j in enumerate(order))
    ideal = sorted(truth, reverse=True)
    idcg = sum(t / math.log2(r + 2) for r, t in enumerate(ideal))
    return dcg / idcg


def _err_by_enumeration(scores, grades, max_grade):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    stop = [(2 ** grades[j] - 1) / 2 ** max_grade for j in order]
    total = 0.0
    for outcome in itertools.product([False, True], repeat=len(order)):
        prob = 1.0
        for s, hit in zip(stop, outcome):
            prob *= s if hit else 1.0 - s
        if any(outcome):
            total += prob / (outcome.index(True) + 1)
    return total


def test_rank_order_breaks_ties_by_index():
    assert rank_order([1.0, 3.0, 3.0, 0.5]).tolist() == [1, 2, 0, 3]


def test_ndcg_perfect_ranking():
    truth = [0.0, 4.0, 1.0, 2.0]
    assert ndcg(truth, truth) == pytest.approx(1.0)


def test_ndcg_two_item_reversed():
    expected = (1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3))
    assert ndcg([0.0, 1.0], [3.0, 1.0]) == pytest.approx(expected, abs=1e-12)


def test_ndcg_matches_oracle():
    rng = np.random.default_rng(21)
    for _ in range(50):
        scores = rng.normal(size=12)
        truth = rng.integers(0, 6, size=12).astype(float)
        truth[0] += 1.0
        assert abs(ndcg(scores, truth) - _ndcg_oracle(scores.tolist(), truth.tolist())) < 1e-9


def test_ndcg_needs_a_positive_count():
    with pytest.raises(MetricError):
        ndcg([1.0, 2.0], [0.0, 0.0])


def test_ndcg_cutoff():
    truth = [1.0, 0.0, 5.0]
    assert ndcg([3.0, 2.0, 1.0], truth, cutoff=1) == pytest.approx(1.0 / 5.0)


def test_quantize_grades():
    grades = quantize_grades([0, 1, 2, 3, 4, 0, 8, 9, 10], max_grade=4)
    assert grades[0] == 0 and grades[5] == 0
    assert grades.max() == 4 and grades[1] == 1
    assert np.all(np.diff(grades[[1, 2, 3, 4, 6, 7, 8]]) >= 0)


def test_top_count_gets_the_top_grade():
    assert quantize_grades([0, 0, 3, 0], max_grade=4).tolist() == [0, 0, 4, 0]
    assert quantize_grades([2, 2, 0], max_grade=4).tolist() == [4, 4, 0]
    perfect = err([1.0, 5.0, 0.0], [0.0, 7.0, 0.0])
    assert perfect == pytest.approx(15 / 16)
    assert err([5.0, 1.0, 0.0], [0.0, 7.0, 0.0]) < perfect


def test_err_single_item_with_top_grade():
    assert err([1.0], [5.0], max_grade=4, grades=[4]) == pytest.approx(15 / 16)


def test_err_only_first_item_graded():
    value = err([3.0, 2.0, 1.0], [5.0, 1.0, 1.0], max_grade=4, grades=[3, 0, 0])
    assert value == pytest.approx(7 / 16)


def test_err_matches_enumeration():
    rng = np.random.default_rng(8)
    for _ in range(30):
        scores = rng.normal(size=3)
        grades = rng.integers(0, 5, size=3)
        truth = grades + 1.0
        got = err(scores, truth, max_grade=4, grades=grades)
        assert got == pytest.approx(_err_by_enumeration(scores.tolist(), grades.tolist(), 4), abs=1e-12)


def test_recall_examples():
    scores = np.arange(20, 0, -1, dtype=float)  # item j ranked j-th
    assert recall_at_k(scores, [0, 1, 2], k=10) == 1.0
    assert recall_at_k(scores, [0, 5, 19], k=25) == 1.0
    assert recall_at_k(scores, [0, 1, 2, 15, 18], k=10) == pytest.approx(0.6)
    with pytest.raises(MetricError):
        recall_at_k(scores, [], k=10)


def test_relevant_items_above_median():
    assert relevant_items([0, 1, 2, 3, 0, 10]).tolist() == [3, 5]
    assert relevant_items([0, 2, 2, 0]).tolist() == [1, 2]


def test_summarize_ci():
    s = summarize([1.0, 3.0])
    assert s.mean == 2.0
    assert s.ci_half_width == pytest.approx(1.96 * math.sqrt(2.0) / math.sqrt(2.0))
    assert summarize([0.5]).ci_half_width == 0.0


def test_rank_metrics_invariant_under_monotone_transform_and_shuffle():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=15)
    truth = rng.integers(0, 7, size=15).astype(float)
    truth[2] = 9.0
    rel = relevant_items(truth)
    base = (ndcg(scores, truth), err(scores, truth), recall_at_k(scores, rel, 5))
    moved = np.exp(scores) * 3.0 + 1.0
    assert (ndcg(moved, truth), err(moved, truth), recall_at_k(moved, rel, 5)) == pytest.approx(base)
    perm = rng.permutation(15)
    inv = np.argsort(perm)
    shuffled = (
        ndcg(scores[perm], truth[perm]),
        err(scores[perm], truth[perm]),
        recall_at_k(scores[perm], inv[rel], 5),
    )
    assert shuffled == pytest.approx(base)


def test_metrics_are_bounded():
    rng = np.random.default_rng(4)
    for _ in range(20):
        scores = rng.normal(size=10)
        truth = rng.integers(0, 4, size=10).astype(float)
        truth[0] = 1.0
        for value in (ndcg(scores, truth), err(scores, truth), recall_at_k(scores, relevant_items(truth), 3)):
            assert 0.0 <= value <= 1.0


def test_evaluate_with_oracle_scorer(small_ds):
    report = evaluate(
        None,
        small_ds,
        Split.HOLDOUT,
        SimilarityKind.DOT,
        scorer=lambda users: small_ds.target.dense_rows(users),
    )
    assert report.n_users + report.n_excluded == 10
    assert report.metrics["correlation"].mean == pytest.approx(1.0)
    assert report.metrics["ndcg"].mean == pytest.approx(1.0)
    assert report.metrics["recall_at_10"].mean == pytest.approx(1.0)


def test_evaluate_averages_per_user_values(small_ds):
    report = evaluate(
        None,
        small_ds,
        Split.HOLDOUT,
        SimilarityKind.DOT,
        MetricConfig(k=3),
        scorer=lambda users: -small_ds.target.dense_rows(users),
    )
    corr = report.metrics["correlation"]
    assert corr.mean == pytest.approx(np.mean(corr.values))
    assert corr.mean == pytest.approx(-1.0)
    assert "recall_at_3" in report.metrics


def test_evaluate_is_reproducible_and_threaded(small_ds):
    params = init_params(
        small_ds.auxiliary.n_items, small_ds.target.n_items, d_aux=6, d=6, hidden_sizes=[8], seed=4
    )
    a = evaluate(params, small_ds, Split.HOLDOUT, SimilarityKind.COSINE, MetricConfig(batch_users=3))
    b = evaluate(params, small_ds, Split.HOLDOUT, SimilarityKind.COSINE, MetricConfig(batch_users=3), threads=4)
    assert a.model_dump() == b.model_dump()
    for name in ("ndcg", "err", "recall_at_10"):
        assert all(0.0 <= v <= 1.0 for v in a.metrics[name].values)


def test_evaluate_errors(small_ds):
    with pytest.raises(MetricError):
        evaluate(None, small_ds, Split.HOLDOUT, SimilarityKind.DOT)
