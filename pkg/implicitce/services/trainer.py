import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from implicitce.core.config import config_hash
from implicitce.core.errors import CheckpointError, DatasetError, MetricError, NonFiniteError, NumericalError
from implicitce.models.config import MetricConfig, TrainConfig
from implicitce.models.data import CrossDomainDataset
from implicitce.models.enums import LossKind, Mode, Split
from implicitce.models.reports import EvalReport
from implicitce.services.dataset import preprocess
from implicitce.services.losses import (
    LossValueAndGrad,
    bpr_loss,
    constant_rows,
    mse_loss,
    sample_corr_loss,
    user_norm_mse_loss,
)
from implicitce.services.metrics import evaluate
from implicitce.services.model import (
    ModelParams,
    apply_running_stats,
    backward,
    init_from_config,
    predict_block,
)
from implicitce.services.optim import Optimizer, make_optimizer

logger = logging.getLogger(__name__)

CORR_LOSSES = (LossKind.SAMPLE_CORR, LossKind.PER_USER_CORR)
MINIBATCH_LOSSES = (LossKind.MSE, LossKind.USER_NORM_MSE, LossKind.USER_NORM_RMSE, LossKind.BPR)
PAIR_DRAWS = 8


@dataclass
class StepStats:
    step: int
    loss: float
    n_users: int
    items_touched: int
    resampled: int = 0
    skipped: int = 0


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Optimizer
    step: int = 0


@dataclass
class Checkpoint:
    params: ModelParams
    best_params: ModelParams
    config: TrainConfig
    step: int = 0
    best_step: int = 0
    best_score: Optional[float] = None
    optimizer_t: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    aux_item_ids: list[str] = field(default_factory=list)
    target_item_ids: list[str] = field(default_factory=list)
    # ingest filters the item id maps were built under
    min_aux: int = 1
    min_target: int = 1

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def serving_params(self) -> ModelParams:
        return self.best_params


class TrainCallback:
    def on_step(self, stats: StepStats) -> None:
        pass

    def on_eval(self, step: int, report: Optional[EvalReport]) -> None:
        pass


def resume_key(cfg: TrainConfig) -> str:
    """Config hash ignoring the step budget, so a run can be extended."""
    return config_hash(cfg.model_copy(update={"steps": 0}))


# --- sampling ----------------------------------------------------------------


def _needs_varying_rows(loss: LossKind) -> bool:
    return loss != LossKind.MSE


def _sample_block(
    ds: CrossDomainDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    train_users: np.ndarray,
    full_items: bool = False,
):
    """Sample S_U and S_I (sorted, without replacement) and look up Y on the block.

    Users whose sampled row is constant are redrawn up to `cfg.max_resample`
    times and then dropped for the step.
    """
    n_items = ds.target.n_items
    if full_items:
        items = np.arange(n_items)
    else:
        items = np.sort(rng.choice(n_items, size=min(cfg.n_si, n_items), replace=False))
    users = np.sort(rng.choice(train_users, size=min(cfg.n_su, train_users.size), replace=False))
    Y = ds.target.lookup_block(users, items)

    resampled = 0
    if _needs_varying_rows(cfg.loss):
        for _ in range(cfg.max_resample):
            bad = constant_rows(Y)
            if bad.size == 0:
                break
            candidates = rng.choice(train_users, size=bad.size)
            fresh = ~np.isin(candidates, users)
            first = np.zeros(candidates.size, dtype=bool)
            first[np.unique(candidates, return_index=True)[1]] = True
            fresh &= first
            if not fresh.any():
                continue
            rows, new_users = bad[fresh], candidates[fresh]
            users[rows] = new_users
            Y[rows] = ds.target.lookup_block(new_users, items)
            resampled += int(rows.size)
        bad = constant_rows(Y)
        if bad.size:
            keep = np.setdiff1d(np.arange(users.size), bad)
            users, Y = users[keep], Y[keep]
        skipped = int(bad.size)
    else:
        skipped = 0
    if resampled or skipped:
        logger.debug("resampled %d and skipped %d constant users", resampled, skipped)
    return users, items, Y, resampled, skipped


def _min_batch(params: ModelParams) -> int:
    return 2 if any(layer.batch_norm for layer in params.layers) else 1


def _corr_step_loss(P: np.ndarray, Y: np.ndarray) -> LossValueAndGrad:
    # users whose predictions are constant on the block carry no gradient this step
    keep = np.ones(P.shape[0], dtype=bool)
    keep[constant_rows(P)] = False
    dP = np.zeros_like(P)
    if not keep.any():
        return LossValueAndGrad(value=1.0, dP=dP)
    res = sample_corr_loss(P[keep], Y[keep])
    dP[keep] = res.dP
    return LossValueAndGrad(value=res.value, dP=dP)


def sample_pairs(Y_row: np.ndarray, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (j1, j2) pairs over the block's items with Y[j2] > Y[j1]."""
    n = Y_row.size
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    draws = rng.integers(0, n, size=(n_pairs * PAIR_DRAWS, 2))
    a, b = draws[:, 0], draws[:, 1]
    valid = Y_row[a] != Y_row[b]
    a, b = a[valid][:n_pairs], b[valid][:n_pairs]
    swap = Y_row[a] > Y_row[b]
    j1 = np.where(swap, b, a)
    j2 = np.where(swap, a, b)
    return np.stack([j1, j2], axis=1)


def _bpr_block_loss(P: np.ndarray, Y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> LossValueAndGrad:
    dP = np.zeros_like(P)
    total, n_pairs = 0.0, 0
    for i in range(P.shape[0]):
        pairs = sample_pairs(Y[i], cfg.n_pairs, rng)
        if len(pairs) == 0:
            continue
        res = bpr_loss(P[i], Y[i], pairs)
        total += res.value
        dP[i] = res.dP
        n_pairs += len(pairs)
    if n_pairs == 0:
        return LossValueAndGrad(value=0.0, dP=dP)
    return LossValueAndGrad(value=total / n_pairs, dP=dP / n_pairs)


def _block_loss(P: np.ndarray, Y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> LossValueAndGrad:
    if cfg.loss in CORR_LOSSES:
        return _corr_step_loss(P, Y)
    if cfg.loss == LossKind.MSE:
        res = mse_loss(P, Y)
        return LossValueAndGrad(value=res.value / P.size, dP=res.dP / P.size)
    if cfg.loss == LossKind.USER_NORM_MSE:
        return user_norm_mse_loss(P, Y)
    if cfg.loss == LossKind.USER_NORM_RMSE:
        return user_norm_mse_loss(P, Y, rooted=True)
    return _bpr_block_loss(P, Y, cfg, rng)


def _run_step(
    state: TrainState,
    ds: CrossDomainDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    train_users: np.ndarray,
    full_items: bool,
) -> StepStats:
    step = state.step + 1
    users, items, Y, resampled, skipped = _sample_block(ds, cfg, rng, train_users, full_items)
    if users.size < _min_batch(state.params):
        state.step = step
        return StepStats(step, 0.0, int(users.size), 0, resampled, skipped + int(users.size))

    try:
        block = predict_block(
            state.params,
            ds.auxiliary.take_rows(users),
            items,
            cfg.similarity,
            Mode.TRAIN,
            users=users,
            dropout_rate=cfg.dropout,
            rng=rng,
        )
    except NonFiniteError as e:
        raise NumericalError(str(e), step=step) from e
    res = _block_loss(block.values, Y, cfg, rng)
    if not math.isfinite(res.value) or not np.all(np.isfinite(res.dP)):
        raise NumericalError(f"non-finite {cfg.loss.value} loss", step=step)
    grads = backward(block, state.params, res.dP)
    state.optimizer.step(state.params, grads)
    apply_running_stats(state.params, block.trace)
    state.step = step
    return StepStats(
        step=step,
        loss=float(res.value),
        n_users=int(users.size),
        items_touched=state.optimizer.rows_updated.get("target_embeddings", 0),
        resampled=resampled,
        skipped=skipped,
    )


def scu_step(
    state: TrainState,
    ds: CrossDomainDataset,
    cfg: TrainConfig,
    step_rng: np.random.Generator,
    train_users: Optional[np.ndarray] = None,
) -> StepStats:
    """One Sample Correlation Update: sample S_U and S_I, predict the block,
    take the sampled correlation loss gradient and update the parameters.
    """
    if cfg.loss not in CORR_LOSSES:
        raise ValueError(f"scu_step needs a correlation loss, got {cfg.loss.value}")
    users = ds.users_in(Split.TRAIN) if train_users is None else train_users
    return _run_step(state, ds, cfg, step_rng, users, full_items=cfg.loss == LossKind.PER_USER_CORR)


def minibatch_step(
    state: TrainState,
    ds: CrossDomainDataset,
    cfg: TrainConfig,
    step_rng: np.random.Generator,
    train_users: Optional[np.ndarray] = None,
) -> StepStats:
    if cfg.loss not in MINIBATCH_LOSSES:
        raise ValueError(f"minibatch_step needs one of the baseline losses, got {cfg.loss.value}")
    users = ds.users_in(Split.TRAIN) if train_users is None else train_users
    return _run_step(state, ds, cfg, step_rng, users, full_items=False)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


# --- training loop -----------------------------------------------------------


def new_state(ds: CrossDomainDataset, cfg: TrainConfig) -> TrainState:
    params = init_from_config(cfg, ds.auxiliary.n_items, ds.target.n_items, ds.n_users)
    return TrainState(params=params, optimizer=make_optimizer(cfg))


def _state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    if resume_key(ckpt.config) != resume_key(cfg):
        raise CheckpointError("checkpoint was trained with a different configuration")
    optimizer = make_optimizer(cfg)
    optimizer.load_state_dict(ckpt.optimizer_state, ckpt.optimizer_t)
    return TrainState(params=ckpt.params.copy(), optimizer=optimizer, step=ckpt.step)


class _LossLog:
    def __init__(self, path: Optional[Path], append: bool, record_timing: bool):
        self.record_timing = record_timing
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not append or not path.exists()
            self._fh = path.open("a" if not fresh else "w", encoding="utf-8", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            if fresh:
                self._writer.writerow(["step", "loss", "wall_ms"])

    def write(self, stats: StepStats, elapsed_ms: float) -> None:
        if self._fh is None:
            return
        wall = int(round(elapsed_ms)) if self.record_timing else 0
        self._writer.writerow([stats.step, repr(stats.loss), wall])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def train(
    ds: CrossDomainDataset,
    cfg: TrainConfig,
    callbacks: Sequence[TrainCallback] = (),
    *,
    resume: Optional[Checkpoint] = None,
    loss_log: Optional[Path] = None,
    threads: int = 1,
    record_timing: bool = True,
    metric_config: Optional[MetricConfig] = None,
) -> Checkpoint:
    """Run `cfg.steps` steps, evaluating on validation users every `eval_every`
    steps and keeping the parameters with the best mean validation correlation.
    """
    ds = preprocess(ds, cfg.preprocess)
    train_users = ds.users_in(Split.TRAIN)
    if train_users.size == 0:
        raise DatasetError("no training users")
    has_validation = ds.users_in(Split.VALIDATION).size > 0
    if not has_validation:
        logger.info("no validation users; best checkpoint tracks the last step")
    full_items = cfg.loss == LossKind.PER_USER_CORR

    if resume is not None:
        state = _state_from_checkpoint(resume, cfg)
        history = [dict(h) for h in resume.history]
        best_params, best_step = resume.best_params.copy(), resume.best_step
        best_score = -math.inf if resume.best_score is None else resume.best_score
    else:
        state = new_state(ds, cfg)
        history, best_params, best_step, best_score = [], state.params.copy(), 0, -math.inf

    def validate() -> None:
        nonlocal best_params, best_step, best_score
        if not has_validation:
            return
        try:
            report = evaluate(
                state.params, ds, Split.VALIDATION, cfg.similarity, metric_config,
                max_users=cfg.eval_max_users, threads=threads,
            )
        except MetricError as e:
            logger.warning("validation at step %d failed: %s", state.step, e)
            report = None
        record = {"step": state.step}
        if report is not None:
            record.update({name: m.mean for name, m in report.metrics.items()})
            score = report.metrics["correlation"].mean
            logger.info(
                "step %d validation correlation %.4f ndcg %.4f",
                state.step, score, report.metrics["ndcg"].mean,
            )
            if score > best_score:
                best_score, best_step, best_params = score, state.step, state.params.copy()
        history.append(record)
        for cb in callbacks:
            cb.on_eval(state.step, report)

    if resume is None:
        validate()

    log = _LossLog(loss_log, append=resume is not None, record_timing=record_timing)
    step_fn = scu_step if cfg.loss in CORR_LOSSES else minibatch_step
    resampled = skipped = 0
    try:
        while state.step < cfg.steps:
            started = time.perf_counter()
            stats = step_fn(state, ds, cfg, step_rng(cfg.seed, state.step + 1), train_users)
            log.write(stats, (time.perf_counter() - started) * 1000.0)
            resampled += stats.resampled
            skipped += stats.skipped
            for cb in callbacks:
                cb.on_step(stats)
            if state.step % cfg.eval_every == 0:
                validate()
    finally:
        log.close()
    if resampled or skipped:
        logger.info("constant sampled rows: %d resampled, %d skipped", resampled, skipped)

    if not has_validation:
        best_params, best_step = state.params.copy(), state.step
    return Checkpoint(
        params=state.params,
        best_params=best_params,
        config=cfg,
        step=state.step,
        best_step=best_step,
        best_score=None if not math.isfinite(best_score) else best_score,
        optimizer_t=state.optimizer.t,
        optimizer_state=state.optimizer.state_dict(),
        history=history,
        aux_item_ids=list(ds.aux_item_ids),
        target_item_ids=list(ds.target_item_ids),
    )
