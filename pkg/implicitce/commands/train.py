import json
import logging
from pathlib import Path
from typing import Any, Optional

import pandas as pd
import typer

from implicitce.commands.common import (
    EXIT_USAGE,
    Stopwatch,
    cli_errors,
    console,
    err_console,
    parse_list,
    print_frame,
    read_json_file,
    settings_of,
)
from implicitce.core.config import canonical_json, config_hash
from implicitce.models.config import SearchSpace, TrainConfig
from implicitce.services.dataset import load_dataset
from implicitce.services.search import random_search
from implicitce.services.trainer import train as run_training
from implicitce.storage.checkpoint import CHECKPOINT_FILE, load_checkpoint, save_checkpoint
from implicitce.storage.manifest import build_manifest, write_manifest
from implicitce.storage.tsv import AUX_FILE, SPLIT_FILE, TARGET_FILE

logger = logging.getLogger("implicitce.cli")

STEPS_FILE = "steps.csv"
HISTORY_FILE = "validation.csv"
SEARCH_FILE = "search.csv"


def resolve_config(config_file: Optional[Path], overrides: dict[str, Any]) -> TrainConfig:
    """Model defaults < JSON config file < explicit flags."""
    data: dict[str, Any] = read_json_file(config_file) if config_file is not None else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.model_validate(data)


def _dataset_inputs(data: Path) -> list[Path]:
    return [data / AUX_FILE, data / TARGET_FILE, data / SPLIT_FILE]


def _write_history(path: Path, history: list[dict]) -> None:
    pd.DataFrame(history).to_csv(path, index=False, lineterminator="\n")


def train(
    ctx: typer.Context,
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset directory (aux.tsv, target.tsv, split.tsv)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory for checkpoint, logs and manifest"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON file with TrainConfig fields"),
    print_config: bool = typer.Option(False, "--print-config", help="Print the resolved config and exit"),
    loss: Optional[str] = typer.Option(None, "--loss", help="sample-corr, per-user-corr, mse, user-norm-mse, user-norm-rmse, bpr"),
    similarity: Optional[str] = typer.Option(None, "--similarity", help="dot, cosine or euclidean"),
    n_su: Optional[int] = typer.Option(None, "--n-su"),
    n_si: Optional[int] = typer.Option(None, "--n-si"),
    n_pairs: Optional[int] = typer.Option(None, "--n-pairs"),
    learning_rate: Optional[float] = typer.Option(None, "--learning-rate", "--lr"),
    optimizer: Optional[str] = typer.Option(None, "--optimizer", help="adam or sgd"),
    l2: Optional[float] = typer.Option(None, "--l2"),
    dropout: Optional[float] = typer.Option(None, "--dropout"),
    transform: Optional[str] = typer.Option(None, "--transform", help="mlp, linear or identity"),
    hidden_sizes: Optional[str] = typer.Option(None, "--hidden-sizes", help="Comma-separated widths, e.g. 1024,1024"),
    batch_norm: Optional[bool] = typer.Option(None, "--batch-norm/--no-batch-norm"),
    d_aux: Optional[int] = typer.Option(None, "--d-aux"),
    d: Optional[int] = typer.Option(None, "--d"),
    biases: Optional[bool] = typer.Option(None, "--biases/--no-biases"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    eval_every: Optional[int] = typer.Option(None, "--eval-every"),
    eval_max_users: Optional[int] = typer.Option(None, "--eval-max-users"),
    preprocess: Optional[str] = typer.Option(None, "--preprocess", help="raw or log1p"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    min_aux: int = typer.Option(1, "--min-aux", min=1),
    min_target: int = typer.Option(1, "--min-target", min=1),
    val_users: int = typer.Option(0, "--val-users", min=0, help="Used only when the dataset has no split.tsv"),
    holdout_users: int = typer.Option(0, "--holdout-users", min=0),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
    checkpoint_precision: str = typer.Option("f4", "--checkpoint-precision", help="f4 or f8"),
):
    """Train a co-embedding model and write model.ckpt, steps.csv and manifest.json."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        cfg = resolve_config(
            config,
            {
                "loss": loss,
                "similarity": similarity,
                "n_su": n_su,
                "n_si": n_si,
                "n_pairs": n_pairs,
                "learning_rate": learning_rate,
                "optimizer": optimizer,
                "l2": l2,
                "dropout": dropout,
                "transform": transform,
                "hidden_sizes": parse_list(hidden_sizes, int),
                "batch_norm": batch_norm,
                "d_aux": d_aux,
                "d": d,
                "biases": biases,
                "steps": steps,
                "eval_every": eval_every,
                "eval_max_users": eval_max_users,
                "preprocess": preprocess,
                "seed": seed,
            },
        )
        if print_config:
            typer.echo(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
            raise typer.Exit(0)
        if data is None or out is None:
            err_console.print("[red]error:[/red] --data and --out are required for training")
            raise typer.Exit(EXIT_USAGE)
        if checkpoint_precision not in ("f4", "f8"):
            err_console.print("[red]error:[/red] --checkpoint-precision must be f4 or f8")
            raise typer.Exit(EXIT_USAGE)

        ds = load_dataset(data, min_aux, min_target, val_users, holdout_users, cfg.seed)
        previous = load_checkpoint(resume) if resume is not None else None
        out.mkdir(parents=True, exist_ok=True)
        logger.info("training %s for %d steps (config %s)", cfg.loss.value, cfg.steps, config_hash(cfg))
        ckpt = run_training(
            ds,
            cfg,
            resume=previous,
            loss_log=out / STEPS_FILE,
            threads=settings.threads,
            record_timing=settings.record_timing,
        )
        ckpt.min_aux, ckpt.min_target = min_aux, min_target
        ckpt_path = save_checkpoint(out / CHECKPOINT_FILE, ckpt, checkpoint_precision)
        outputs = [ckpt_path, out / STEPS_FILE]
        if ckpt.history:
            _write_history(out / HISTORY_FILE, ckpt.history)
            outputs.append(out / HISTORY_FILE)
        inputs = _dataset_inputs(data) + ([resume] if resume is not None else [])
        manifest = build_manifest(
            "train",
            json.loads(canonical_json(cfg)),
            inputs=inputs,
            outputs=outputs,
            config_hash=ckpt.config_hash,
            seed=cfg.seed,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    best = "n/a" if ckpt.best_score is None else f"{ckpt.best_score:.4f}"
    console.print(f"step {ckpt.step}: best validation correlation {best} at step {ckpt.best_step}")


def search(
    ctx: typer.Context,
    data: Path = typer.Option(..., "--data"),
    out: Path = typer.Option(..., "--out"),
    trials: int = typer.Option(10, "--trials", min=1),
    search_seed: int = typer.Option(0, "--search-seed"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON file with the base TrainConfig"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    loss: Optional[str] = typer.Option(None, "--loss"),
    similarities: Optional[str] = typer.Option(None, "--similarities", help="Comma-separated similarity kinds to draw from"),
    val_users: int = typer.Option(0, "--val-users", min=0),
    holdout_users: int = typer.Option(0, "--holdout-users", min=0),
    checkpoint_precision: str = typer.Option("f4", "--checkpoint-precision"),
):
    """Seeded random search over learning rate, dropout, L2 and similarity."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        base = resolve_config(config, {"steps": steps, "loss": loss})
        space = SearchSpace() if similarities is None else SearchSpace(similarities=parse_list(similarities, str))
        ds = load_dataset(data, 1, 1, val_users, holdout_users, base.seed)
        table, best = random_search(ds, base, space, trials, search_seed, settings.threads)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / SEARCH_FILE, index=False, lineterminator="\n")
        outputs = [out / SEARCH_FILE]
        if best is not None:
            outputs.append(save_checkpoint(out / CHECKPOINT_FILE, best, checkpoint_precision))
        manifest = build_manifest(
            "search",
            {"base": base.model_dump(mode="json"), "space": space.model_dump(mode="json"), "trials": trials},
            inputs=_dataset_inputs(data),
            outputs=outputs,
            config_hash=None if best is None else best.config_hash,
            seed=search_seed,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    print_frame(table, title="random search")
