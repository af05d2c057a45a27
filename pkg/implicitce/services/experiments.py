"""Simulation studies: outlier convergence rates, sampled-correlation
approximation error, and the bias of the sampled gradient.

Every runner is deterministic given its spec's seed and returns a pandas
frame whose columns are listed by `describe_columns()`.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from implicitce.core.errors import LossError
from implicitce.models.enums import LossKind
from implicitce.models.experiments import BiasDecaySpec, ConvergenceSpec, SampleErrSpec
from implicitce.services.losses import (
    LossValueAndGrad,
    constant_rows,
    per_user_corr_loss,
    row_pearson,
    sample_corr_loss,
    user_norm_mse_loss,
)

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ["loss", "outlier_rate", "trial", "steps", "converged", "final_loss"]
SAMPLE_ERROR_COLUMNS = ["sample_size", "corr_sq_error", "grad_sq_error", "trials"]
BIAS_DECAY_COLUMNS = ["sample_size", "bias_norm", "trials"]

_DESCRIPTIONS = {
    "convergence": {
        "loss": "loss function being trained",
        "outlier_rate": "probability of an outlier arrival per step",
        "trial": "trial index",
        "steps": "first step with reference loss below the threshold (max_steps if censored)",
        "converged": "1 if the threshold was reached, 0 if censored",
        "final_loss": "reference loss when the run stopped",
    },
    "sample-error": {
        "sample_size": "number of sampled items",
        "corr_sq_error": "mean squared error of the sampled per-user correlation",
        "grad_sq_error": "mean squared error of the rescaled sampled gradient on sampled items",
        "trials": "samples drawn per size",
    },
    "bias-decay": {
        "sample_size": "number of sampled items",
        "bias_norm": "norm of the mean rescaled sampled gradient minus the full gradient",
        "trials": "samples drawn per size",
    },
}


def describe_columns() -> dict[str, list[tuple[int, str, str]]]:
    """1-based column numbers, names and meanings for every experiment CSV."""
    return {
        name: [(i + 1, col, meaning) for i, (col, meaning) in enumerate(cols.items())]
        for name, cols in _DESCRIPTIONS.items()
    }


def _map(fn, tasks, threads: int) -> list:
    if threads <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


# --- outlier convergence -----------------------------------------------------


@dataclass
class _Arrivals:
    """Pre-drawn users for one (trial, rate), shared by every loss."""

    clean: np.ndarray
    is_outlier: np.ndarray
    outlier_x: np.ndarray
    outlier_y: np.ndarray


def _single_user_loss(kind: LossKind, p: np.ndarray, y: np.ndarray) -> LossValueAndGrad:
    P, Y = p[None, :], y[None, :]
    if kind == LossKind.PER_USER_CORR:
        return per_user_corr_loss(P, Y)
    return user_norm_mse_loss(P, Y, rooted=kind == LossKind.USER_NORM_RMSE)


def _reference_loss(kind: LossKind, P: np.ndarray, Y: np.ndarray) -> float:
    if not np.all(np.isfinite(P)):
        return np.inf
    if kind == LossKind.PER_USER_CORR:
        if constant_rows(P).size:
            return np.inf
        return float(np.mean(1.0 - row_pearson(P, Y)))
    return user_norm_mse_loss(P, Y, rooted=kind == LossKind.USER_NORM_RMSE).value


def _gaussian(rng: np.random.Generator, n: int, spec: ConvergenceSpec) -> np.ndarray:
    return spec.aux_mean + spec.aux_std * rng.standard_normal((n, spec.n_aux_items))


def _draw_arrivals(spec: ConvergenceSpec, trial: int, rate_idx: int, rate: float) -> _Arrivals:
    rng = np.random.default_rng([spec.seed, trial, rate_idx])
    clean = _gaussian(rng, spec.max_steps, spec)
    is_outlier = rng.random(spec.max_steps) < rate
    outlier_x = spec.outlier_scale * _gaussian(rng, spec.max_steps, spec)
    outlier_y = rng.random((spec.max_steps, spec.n_target_items))
    return _Arrivals(clean=clean, is_outlier=is_outlier, outlier_x=outlier_x, outlier_y=outlier_y)


def _converge_one(
    spec: ConvergenceSpec,
    kind: LossKind,
    W0: np.ndarray,
    M: np.ndarray,
    arrivals: _Arrivals,
    ref_x: np.ndarray,
    ref_y: np.ndarray,
) -> tuple[int, bool, float]:
    W = W0.copy()
    lr = spec.learning_rates[kind]
    threshold = spec.thresholds[kind]

    def update(x: np.ndarray, y: np.ndarray) -> None:
        res = _single_user_loss(kind, W @ x, y)
        W[...] -= lr * np.outer(res.dP[0], x)

    loss = _reference_loss(kind, ref_x @ W.T, ref_y)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, spec.max_steps + 1):
            x = arrivals.clean[step - 1]
            update(x, M @ x)
            if arrivals.is_outlier[step - 1]:
                update(arrivals.outlier_x[step - 1], arrivals.outlier_y[step - 1])
            if not np.all(np.isfinite(W)):
                return spec.max_steps, False, float("inf")
            loss = _reference_loss(kind, ref_x @ W.T, ref_y)
            if loss < threshold:
                return step, True, loss
    return spec.max_steps, False, loss


def run_convergence(spec: ConvergenceSpec, threads: int = 1) -> pd.DataFrame:
    """Steps until a linear model reaches each loss's threshold on a clean
    reference batch when a fraction of arrivals are outlier users with huge
    inputs and random targets.

    Each step takes one clean single-user gradient step and, with probability
    p, one outlier step. Losses see identical arrival sequences within a
    (trial, rate) cell. Runs that never reach the threshold are censored at
    `max_steps`.
    """
    M = np.random.default_rng([spec.seed]).random((spec.n_target_items, spec.n_aux_items))
    tasks = [(t, r) for t in range(spec.trials) for r in range(len(spec.outlier_rates))]

    def run_cell(task: tuple[int, int]) -> list[dict]:
        trial, rate_idx = task
        rate = spec.outlier_rates[rate_idx]
        trial_rng = np.random.default_rng([spec.seed, trial])
        W0 = spec.init_scale * trial_rng.standard_normal((spec.n_target_items, spec.n_aux_items))
        ref_x = _gaussian(trial_rng, spec.reference_users, spec)
        ref_y = ref_x @ M.T
        arrivals = _draw_arrivals(spec, trial, rate_idx, rate)
        rows = []
        for kind in spec.loss_set:
            steps, converged, final = _converge_one(spec, kind, W0, M, arrivals, ref_x, ref_y)
            rows.append(
                {
                    "loss": kind.value,
                    "outlier_rate": rate,
                    "trial": trial,
                    "steps": steps,
                    "converged": int(converged),
                    "final_loss": final,
                }
            )
        return rows

    rows = [r for cell in _map(run_cell, tasks, threads) for r in cell]
    order = {kind.value: i for i, kind in enumerate(spec.loss_set)}
    df = pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS)
    df["_order"] = df["loss"].map(order)
    df = df.sort_values(["_order", "outlier_rate", "trial"], kind="stable").drop(columns="_order")
    censored = int((df["converged"] == 0).sum())
    if censored:
        logger.info("%d of %d convergence runs were censored at %d steps", censored, len(df), spec.max_steps)
    return df.reset_index(drop=True)


def convergence_medians(df: pd.DataFrame) -> pd.DataFrame:
    return df.groupby(["loss", "outlier_rate"], sort=False, as_index=False)["steps"].median()


# --- sampled correlation error -----------------------------------------------


def _sample_items(rng: np.random.Generator, n_items: int, size: int, P: np.ndarray, Y: np.ndarray, tries: int = 10):
    for _ in range(tries):
        idx = np.sort(rng.choice(n_items, size=size, replace=False))
        if not constant_rows(P[:, idx]).size and not constant_rows(Y[:, idx]).size:
            return idx
    raise LossError(f"could not draw a nonconstant sample of {size} items")


def run_sample_error(spec: SampleErrSpec, threads: int = 1) -> pd.DataFrame:
    """Squared error of the sampled correlation and its gradient against the
    population values, for each sample size.

    The sampled gradient is rescaled by n/N so that it estimates the
    population gradient on the sampled coordinates.
    """
    rng = np.random.default_rng([spec.seed])
    N = spec.n_items_population
    P = rng.random((spec.n_users, N))
    Y = rng.random((spec.n_users, N))
    full = per_user_corr_loss(P, Y)
    corr = row_pearson(P, Y)

    def run_size(size_idx: int) -> dict:
        n = spec.sample_sizes[size_idx]
        size_rng = np.random.default_rng([spec.seed, size_idx])
        corr_err = grad_err = 0.0
        if n == N:
            return {"sample_size": n, "corr_sq_error": 0.0, "grad_sq_error": 0.0, "trials": spec.trials}
        for _ in range(spec.trials):
            idx = _sample_items(size_rng, N, n, P, Y)
            sampled = sample_corr_loss(P[:, idx], Y[:, idx])
            corr_s = row_pearson(P[:, idx], Y[:, idx])
            corr_err += float(np.mean((corr_s - corr) ** 2))
            grad_err += float(np.mean(((n / N) * sampled.dP - full.dP[:, idx]) ** 2))
        return {
            "sample_size": n,
            "corr_sq_error": corr_err / spec.trials,
            "grad_sq_error": grad_err / spec.trials,
            "trials": spec.trials,
        }

    rows = _map(run_size, range(len(spec.sample_sizes)), threads)
    return pd.DataFrame(rows, columns=SAMPLE_ERROR_COLUMNS)


# --- bias of the sampled gradient --------------------------------------------


def _bias_norm(P: np.ndarray, Y: np.ndarray, full: np.ndarray, size: int, trials: int, rng: np.random.Generator) -> float:
    n_items = P.shape[1]
    if size == n_items:
        return 0.0
    total = np.zeros_like(full)
    included = np.zeros(n_items)
    for _ in range(trials):
        idx = _sample_items(rng, n_items, size, P, Y)
        total[:, idx] += sample_corr_loss(P[:, idx], Y[:, idx]).dP
        included[idx] += 1
    seen = included > 0
    estimate = np.zeros_like(full)
    estimate[:, seen] = (size / n_items) * total[:, seen] / included[seen]
    return float(np.linalg.norm(estimate[:, seen] - full[:, seen]))


def run_bias_decay(spec: BiasDecaySpec, threads: int = 1) -> pd.DataFrame:
    """Norm of the bias of the rescaled sampled gradient for each sample size."""
    rng = np.random.default_rng([spec.seed])
    P = rng.random((spec.n_users, spec.n_items))
    Y = rng.random((spec.n_users, spec.n_items))
    full = per_user_corr_loss(P, Y).dP

    def run_size(size_idx: int) -> dict:
        size = spec.sizes[size_idx]
        bias = _bias_norm(P, Y, full, size, spec.trials, np.random.default_rng([spec.seed, size_idx]))
        return {"sample_size": size, "bias_norm": bias, "trials": spec.trials}

    rows = _map(run_size, range(len(spec.sizes)), threads)
    return pd.DataFrame(rows, columns=BIAS_DECAY_COLUMNS)


def bias_slope(table: pd.DataFrame, n_items: Optional[int] = None) -> float:
    """Least-squares slope of log(bias) against log(size), over sizes below n_items."""
    df = table[table["bias_norm"] > 0]
    if n_items is not None:
        df = df[df["sample_size"] < n_items]
    if len(df) < 2:
        raise ValueError("need at least two sizes with nonzero bias")
    slope, _ = np.polyfit(np.log(df["sample_size"].to_numpy(float)), np.log(df["bias_norm"].to_numpy(float)), 1)
    return float(slope)
