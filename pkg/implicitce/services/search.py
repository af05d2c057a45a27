import logging
import math
from typing import Optional

import numpy as np
import pandas as pd

from implicitce.core.config import config_hash
from implicitce.core.errors import ImplicitCEError
from implicitce.models.config import SearchSpace, TrainConfig
from implicitce.models.data import CrossDomainDataset
from implicitce.services.trainer import Checkpoint, train

logger = logging.getLogger(__name__)

SEARCH_COLUMNS = [
    "trial", "learning_rate", "dropout", "l2", "similarity",
    "best_step", "best_correlation", "config_hash", "status",
]


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_config(base: TrainConfig, space: SearchSpace, rng: np.random.Generator) -> TrainConfig:
    update = {
        "learning_rate": _log_uniform(rng, *space.learning_rate),
        "dropout": float(rng.uniform(*space.dropout)),
        "l2": _log_uniform(rng, *space.l2),
        "similarity": space.similarities[int(rng.integers(len(space.similarities)))],
    }
    return TrainConfig.model_validate({**base.model_dump(), **update})


def random_search(
    ds: CrossDomainDataset,
    base: TrainConfig,
    space: SearchSpace,
    n_trials: int,
    seed: int = 0,
    threads: int = 1,
) -> tuple[pd.DataFrame, Optional[Checkpoint]]:
    """Train `n_trials` configs drawn from `space` and rank them by best
    validation correlation. Returns the table (best first) and the winning
    checkpoint.
    """
    rng = np.random.default_rng([seed])
    rows, best = [], None
    for trial in range(n_trials):
        cfg = sample_config(base, space, rng)
        row = {
            "trial": trial,
            "learning_rate": cfg.learning_rate,
            "dropout": cfg.dropout,
            "l2": cfg.l2,
            "similarity": cfg.similarity.value,
            "config_hash": config_hash(cfg),
        }
        try:
            ckpt = train(ds, cfg, threads=threads, record_timing=False)
        except ImplicitCEError as e:
            logger.warning("search trial %d failed: %s", trial, e)
            rows.append({**row, "best_step": -1, "best_correlation": float("nan"), "status": "failed"})
            continue
        score = ckpt.best_score if ckpt.best_score is not None else float("nan")
        rows.append({**row, "best_step": ckpt.best_step, "best_correlation": score, "status": "ok"})
        logger.info("search trial %d: correlation %.4f (%s)", trial, score, cfg.similarity.value)
        if not math.isnan(score) and (best is None or score > best.best_score):
            best = ckpt

    df = pd.DataFrame(rows, columns=SEARCH_COLUMNS)
    df = df.sort_values("best_correlation", ascending=False, na_position="last", kind="stable")
    return df.reset_index(drop=True), best
