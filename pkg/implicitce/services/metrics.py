import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

import numpy as np

from implicitce.core.errors import MetricError
from implicitce.models.config import MetricConfig
from implicitce.models.data import CrossDomainDataset
from implicitce.models.enums import SimilarityKind, Split
from implicitce.models.reports import EvalReport, MetricSummary
from implicitce.services.losses import constant_rows, row_pearson
from implicitce.services.model import ModelParams, embed_users, score_items

logger = logging.getLogger(__name__)

Z_95 = 1.96

Scorer = Callable[[np.ndarray], np.ndarray]


def rank_order(scores) -> np.ndarray:
    """Item indices by descending score; ties go to the lower item index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def _truth(true_counts) -> np.ndarray:
    truth = np.asarray(true_counts, dtype=np.float64)
    if not np.any(truth > 0):
        raise MetricError("ranking metrics need at least one positive count")
    return truth


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg(pred_scores, true_counts, cutoff: Optional[int] = None) -> float:
    truth = _truth(true_counts)
    n = truth.size if cutoff is None else min(cutoff, truth.size)
    disc = _discounts(n)
    dcg = float(np.sum(truth[rank_order(pred_scores)][:n] * disc))
    idcg = float(np.sum(np.sort(truth)[::-1][:n] * disc))
    return dcg / idcg


def quantize_grades(true_counts, max_grade: int = 4) -> np.ndarray:
    """0 for absent items; positive counts get 1..max_grade by per-user quantile.

    A count's grade is max_grade minus the number of quantile thresholds it
    falls strictly below, so the user's largest count (and a lone positive)
    always gets max_grade.
    """
    truth = np.asarray(true_counts, dtype=np.float64)
    grades = np.zeros(truth.size, dtype=np.int64)
    pos = truth > 0
    if not np.any(pos) or max_grade < 1:
        return grades
    qs = np.arange(1, max_grade) / max_grade
    thresholds = np.quantile(truth[pos], qs) if qs.size else np.empty(0)
    grades[pos] = max_grade - np.sum(truth[pos][:, None] < thresholds[None, :], axis=1)
    return grades


def err(pred_scores, true_counts, max_grade: int = 4, grades=None, cutoff: Optional[int] = None) -> float:
    """Expected reciprocal rank with stop probability (2^g - 1) / 2^max_grade."""
    truth = _truth(true_counts)
    g = quantize_grades(truth, max_grade) if grades is None else np.asarray(grades, dtype=np.int64)
    order = rank_order(pred_scores)
    if cutoff is not None:
        order = order[:cutoff]
    stop = (np.power(2.0, g[order]) - 1.0) / 2.0 ** max_grade
    reach = np.concatenate(([1.0], np.cumprod(1.0 - stop)[:-1]))
    return float(np.sum(stop * reach / np.arange(1, order.size + 1)))


def relevant_items(true_counts) -> np.ndarray:
    """Items counted above the user's median positive count (all positives if none are)."""
    truth = _truth(true_counts)
    median = np.median(truth[truth > 0])
    rel = np.flatnonzero(truth > median)
    return rel if rel.size else np.flatnonzero(truth > 0)


def recall_at_k(pred_scores, relevant, k: int = 10) -> float:
    rel = np.asarray(relevant)
    if rel.dtype == bool:
        rel = np.flatnonzero(rel)
    if rel.size == 0:
        raise MetricError("recall needs a nonempty relevant set")
    top = rank_order(pred_scores)[:k]
    hits = int(np.isin(top, rel).sum())
    return hits / min(k, rel.size)


def summarize(values: Sequence[float]) -> MetricSummary:
    v = np.asarray(values, dtype=np.float64)
    half = Z_95 * float(np.std(v, ddof=1)) / np.sqrt(v.size) if v.size > 1 else 0.0
    return MetricSummary(values=[float(x) for x in v], mean=float(np.mean(v)), ci_half_width=half)


def metric_names(config: MetricConfig) -> list[str]:
    return ["correlation", "ndcg", "err", f"recall_at_{config.k}"]


def _score_chunk(
    params: Optional[ModelParams],
    ds: CrossDomainDataset,
    chunk: np.ndarray,
    similarity: SimilarityKind,
    config: MetricConfig,
    scorer: Optional[Scorer],
):
    truth = ds.target.dense_rows(chunk)
    keep = np.ones(chunk.size, dtype=bool)
    if scorer is not None:
        scores = np.asarray(scorer(chunk), dtype=np.float64)
    else:
        emb = embed_users(params, ds.auxiliary.take_rows(chunk))
        if similarity == SimilarityKind.COSINE:
            keep &= np.linalg.norm(emb, axis=1) > 0
        scores = np.zeros((chunk.size, ds.target.n_items))
        if keep.any():
            scores[keep] = score_items(params, similarity, emb[keep], users=chunk[keep])
    keep[constant_rows(truth)] = False
    keep[constant_rows(scores)] = False

    rows = []
    if keep.any():
        corr = row_pearson(scores[keep], truth[keep])
        for c, s, t in zip(corr, scores[keep], truth[keep]):
            rows.append(
                (
                    float(c),
                    ndcg(s, t, config.ndcg_cutoff),
                    err(s, t, config.max_grade),
                    recall_at_k(s, relevant_items(t), config.k),
                )
            )
    return rows, int((~keep).sum())


def evaluate(
    params: Optional[ModelParams],
    ds: CrossDomainDataset,
    split: Split,
    similarity: SimilarityKind,
    config: Optional[MetricConfig] = None,
    *,
    scorer: Optional[Scorer] = None,
    max_users: Optional[int] = None,
    threads: int = 1,
    config_hash: Optional[str] = None,
) -> EvalReport:
    """Score every target item for each user of `split` and aggregate the
    per-user correlation, NDCG, ERR and Recall@k into means with 95% CIs.

    Users whose target row or prediction row is constant are excluded.
    `scorer(user_indices) -> scores` replaces the model when given.
    """
    config = config or MetricConfig()
    if params is None and scorer is None:
        raise MetricError("evaluate needs model parameters or a scorer")
    users = ds.users_in(split)
    if max_users is not None:
        users = users[:max_users]
    if users.size == 0:
        raise MetricError(f"split {split.value!r} has no users")

    chunks = [users[i:i + config.batch_users] for i in range(0, users.size, config.batch_users)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda c: _score_chunk(params, ds, c, similarity, config, scorer), chunks))

    rows = [r for chunk_rows, _ in results for r in chunk_rows]
    excluded = sum(n for _, n in results)
    if excluded:
        logger.warning("%d %s users with constant target or prediction rows were excluded", excluded, split.value)
    if not rows:
        raise MetricError(f"no evaluable users in split {split.value!r}")

    columns = list(zip(*rows))
    return EvalReport(
        split=split.value,
        n_users=len(rows),
        n_excluded=excluded,
        config_hash=config_hash,
        metrics={name: summarize(col) for name, col in zip(metric_names(config), columns)},
    )
