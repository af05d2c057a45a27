"""Training objectives.

Every loss takes a prediction block P and a matching count block Y and
returns the loss value together with dL/dP, so it can be chained into
`model.backward`.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from implicitce.core.errors import ConstantRowError, LossError


@dataclass
class LossValueAndGrad:
    value: float
    dP: np.ndarray


def _check_shapes(P: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if P.shape != Y.shape:
        raise LossError(f"prediction block {P.shape} and count block {Y.shape} differ in shape")
    return P, Y


def constant_rows(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.flatnonzero(np.all(X == X[:, :1], axis=1))


def mse_loss(P, Y) -> LossValueAndGrad:
    P, Y = _check_shapes(P, Y)
    diff = P - Y
    return LossValueAndGrad(value=float(np.sum(diff * diff)), dP=2.0 * diff)


def normalize_rows(Y) -> np.ndarray:
    """(Y_i - mean(Y_i)) / ||Y_i - mean(Y_i)||, using the centered norm."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    bad = constant_rows(Y)
    if bad.size:
        raise ConstantRowError(bad, what="count row")
    centered = Y - Y.mean(axis=1, keepdims=True)
    return centered / np.linalg.norm(centered, axis=1, keepdims=True)


def user_norm_mse_loss(P, Y, rooted: bool = False) -> LossValueAndGrad:
    P, Y = _check_shapes(P, Y)
    n_users, n_items = P.shape
    diff = P - normalize_rows(Y)
    scale = 1.0 / (n_users * n_items)
    if rooted:
        # sum_j sqrt((P - Yhat)^2) is a mean absolute deviation; subgradient 0 at the kink
        return LossValueAndGrad(value=float(np.sum(np.abs(diff)) * scale), dP=np.sign(diff) * scale)
    return LossValueAndGrad(value=float(np.sum(diff * diff)) * scale, dP=2.0 * diff * scale)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def bpr_loss(P_row, Y_row, pairs: Sequence[tuple[int, int]]) -> LossValueAndGrad:
    """Sum over pairs of -ln sigmoid(P_j2 - P_j1), where each pair has Y_j2 > Y_j1."""
    P_row = np.asarray(P_row, dtype=np.float64).reshape(-1)
    Y_row = np.asarray(Y_row, dtype=np.float64).reshape(-1)
    if P_row.shape != Y_row.shape:
        raise LossError("prediction and count rows differ in length")
    dP = np.zeros_like(P_row)
    if len(pairs) == 0:
        return LossValueAndGrad(value=0.0, dP=dP)
    idx = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    j1, j2 = idx[:, 0], idx[:, 1]
    bad = np.flatnonzero(Y_row[j2] <= Y_row[j1])
    if bad.size:
        k = int(bad[0])
        raise LossError(f"pair {k} ({int(j1[k])}, {int(j2[k])}) is not ordered by count")
    x = P_row[j2] - P_row[j1]
    weight = 1.0 / (1.0 + np.exp(np.clip(x, -700, 700)))  # sigmoid(-x)
    np.add.at(dP, j2, -weight)
    np.add.at(dP, j1, weight)
    return LossValueAndGrad(value=float(-np.sum(_log_sigmoid(x))), dP=dP)


def row_pearson(P, Y) -> np.ndarray:
    """Per-row Pearson correlation; constant rows raise `ConstantRowError`."""
    P, Y = _check_shapes(P, Y)
    return _corr_terms(P, Y)[0]


def pearson(P_row, Y_row) -> float:
    P_row = np.asarray(P_row, dtype=np.float64).reshape(-1)
    Y_row = np.asarray(Y_row, dtype=np.float64).reshape(-1)
    if P_row.size < 2:
        raise LossError("pearson needs at least two entries")
    return float(row_pearson(P_row[None, :], Y_row[None, :])[0])


def _corr_terms(P: np.ndarray, Y: np.ndarray):
    bad_p, bad_y = constant_rows(P), constant_rows(Y)
    if bad_y.size:
        raise ConstantRowError(bad_y, what="count row")
    if bad_p.size:
        raise ConstantRowError(bad_p, what="prediction row")
    pc = P - P.mean(axis=1, keepdims=True)
    yc = Y - Y.mean(axis=1, keepdims=True)
    s_pp = np.sum(pc * pc, axis=1)
    s_yy = np.sum(yc * yc, axis=1)
    s_py = np.sum(pc * yc, axis=1)
    denom = np.sqrt(s_pp * s_yy)
    corr = np.clip(s_py / denom, -1.0, 1.0)
    return corr, pc, yc, s_pp, s_py, denom


def _corr_loss(P: np.ndarray, Y: np.ndarray) -> LossValueAndGrad:
    if P.shape[1] < 2:
        raise LossError("correlation needs at least two items")
    corr, pc, yc, s_pp, s_py, denom = _corr_terms(P, Y)
    n_users = P.shape[0]
    dP = -(yc - (s_py / s_pp)[:, None] * pc) / denom[:, None] / n_users
    return LossValueAndGrad(value=float(np.mean(1.0 - corr)), dP=dP)


def per_user_corr_loss(P, Y) -> LossValueAndGrad:
    """(1/N_U) sum_i (1 - corr(P_i, Y_i))."""
    P, Y = _check_shapes(P, Y)
    return _corr_loss(P, Y)


def sample_corr_loss(P, Y) -> LossValueAndGrad:
    """The per-user correlation loss on a sampled (S_U x S_I) block.

    Means and sums run over the sampled items only; constant sampled rows
    raise `ConstantRowError` so the caller can resample those users.
    """
    P, Y = _check_shapes(P, Y)
    return _corr_loss(P, Y)
