import csv
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import typer
from rich.table import Table

from implicitce.commands.common import Stopwatch, cli_errors, console, parse_enum, settings_of
from implicitce.core.errors import CheckpointError, DatasetError
from implicitce.models.config import MetricConfig
from implicitce.models.data import CrossDomainDataset
from implicitce.models.enums import Preprocess, Split
from implicitce.models.reports import EvalReport
from implicitce.services.dataset import load_dataset, preprocess
from implicitce.services.metrics import evaluate as run_evaluation
from implicitce.services.metrics import rank_order
from implicitce.services.model import ModelParams, embed_users, score_items
from implicitce.services.trainer import Checkpoint
from implicitce.storage.checkpoint import load_checkpoint
from implicitce.storage.embeddings import write_embeddings, write_sidecar
from implicitce.storage.manifest import build_manifest, write_manifest
from implicitce.storage.tsv import AUX_FILE, SPLIT_FILE, TARGET_FILE, read_affinities

logger = logging.getLogger("implicitce.cli")

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
RECOMMENDATIONS_FILE = "recommendations.tsv"


def _check_compatible(ckpt: Checkpoint, ds: CrossDomainDataset) -> None:
    if ckpt.aux_item_ids != ds.aux_item_ids or ckpt.target_item_ids != ds.target_item_ids:
        raise CheckpointError("dataset item ids do not match the checkpoint's item id maps")


def _params(ckpt: Checkpoint, last: bool) -> ModelParams:
    return ckpt.params if last else ckpt.best_params


def _report_table(report: EvalReport) -> Table:
    table = Table(title=f"{report.split} ({report.n_users} users, {report.n_excluded} excluded)")
    table.add_column("metric")
    table.add_column("mean", justify="right")
    table.add_column("95% CI", justify="right")
    for name, m in report.metrics.items():
        table.add_row(name, f"{m.mean:.4f}", f"±{m.ci_half_width:.4f}")
    return table


def _write_report(out: Path, report: EvalReport, label: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / REPORT_JSON, out / REPORT_CSV
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    row = report.to_csv_row(label)
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
    return [json_path, csv_path]


def evaluate(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    data: Path = typer.Option(..., "--data"),
    out: Path = typer.Option(..., "--out"),
    split: str = typer.Option("holdout", "--split", help="train, validation or holdout"),
    k: int = typer.Option(10, "--k", min=1),
    max_grade: int = typer.Option(4, "--max-grade", min=1),
    last: bool = typer.Option(False, "--last", help="Score the last parameters instead of the best"),
    label: Optional[str] = typer.Option(None, "--label", help="Row label for report.csv"),
):
    """Per-user correlation, NDCG, ERR and Recall@k with 95% confidence intervals."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        split_e = parse_enum(Split, split, "--split")
        ckpt = load_checkpoint(checkpoint)
        ds = load_dataset(data, ckpt.min_aux, ckpt.min_target)
        _check_compatible(ckpt, ds)
        ds = preprocess(ds, ckpt.config.preprocess)
        metric_config = MetricConfig(k=k, max_grade=max_grade)
        report = run_evaluation(
            _params(ckpt, last),
            ds,
            split_e,
            ckpt.config.similarity,
            metric_config,
            threads=settings.threads,
            config_hash=ckpt.config_hash,
        )
        outputs = _write_report(out, report, label or ckpt.config.loss.value)
        manifest = build_manifest(
            "evaluate",
            {"split": split_e.value, "metrics": metric_config.model_dump(mode="json"), "last": last},
            inputs=[checkpoint, data / AUX_FILE, data / TARGET_FILE, data / SPLIT_FILE],
            outputs=outputs,
            config_hash=ckpt.config_hash,
            seed=ckpt.config.seed,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    console.print(_report_table(report))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    return rank_order(scores)[:k]


def recommend(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    affinities: Path = typer.Option(..., "--affinities", help="TSV of `aux_item_id <TAB> count` for one new user"),
    k: int = typer.Option(10, "--k", "-k", min=1),
    out: Optional[Path] = typer.Option(None, "--out", help="Also write recommendations.tsv and a manifest here"),
):
    """Top-k target items for a user who was not seen at training time."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        ckpt = load_checkpoint(checkpoint)
        params = ckpt.best_params
        counts = read_affinities(affinities)
        index = {item: j for j, item in enumerate(ckpt.aux_item_ids)}
        unknown = sorted(item for item in counts if item not in index)
        if unknown:
            logger.warning("skipping %d unknown auxiliary item ids (first: %s)", len(unknown), unknown[0])
        known = [(index[item], c) for item, c in counts.items() if item in index and c > 0]
        if not known:
            raise DatasetError(f"{affinities}: none of the auxiliary item ids are known to the model")
        known.sort()
        cols = np.array([j for j, _ in known], dtype=np.int64)
        vals = np.array([c for _, c in known], dtype=np.float64)
        if ckpt.config.preprocess == Preprocess.LOG1P:
            vals = np.log1p(vals)
        row = sp.csr_matrix((vals, cols, np.array([0, cols.size])), shape=(1, len(ckpt.aux_item_ids)))
        scores = score_items(params, ckpt.config.similarity, embed_users(params, row))[0]
        best = top_k(scores, k)
        lines = [(ckpt.target_item_ids[j], float(scores[j])) for j in best]
        for item, score in lines:
            typer.echo(f"{item}\t{score!r}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            path = out / RECOMMENDATIONS_FILE
            path.write_text("".join(f"{item}\t{score!r}\n" for item, score in lines), encoding="utf-8")
            manifest = build_manifest(
                "recommend",
                {"k": k},
                inputs=[checkpoint, affinities],
                outputs=[path],
                config_hash=ckpt.config_hash,
                wall_time_s=watch.seconds,
            )
            write_manifest(out, manifest)


def export(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    out: Path = typer.Option(..., "--out"),
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset directory, needed for users.tsv"),
    split: Optional[str] = typer.Option(None, "--split", help="Also export user embeddings of this split"),
):
    """Export item (and optionally user) embeddings for nearest-neighbour search."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        ckpt = load_checkpoint(checkpoint)
        params = ckpt.best_params
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "target_items": write_embeddings(out / "target_items.tsv", ckpt.target_item_ids, params.target_embeddings),
            "aux_items": write_embeddings(out / "aux_items.tsv", ckpt.aux_item_ids, params.aux_embeddings),
        }
        inputs = [checkpoint]
        if split is not None:
            if data is None:
                raise DatasetError("--split needs --data")
            split_e = parse_enum(Split, split, "--split")
            ds = load_dataset(data, ckpt.min_aux, ckpt.min_target)
            _check_compatible(ckpt, ds)
            ds = preprocess(ds, ckpt.config.preprocess)
            users = ds.users_in(split_e)
            if users.size == 0:
                raise DatasetError(f"split {split_e.value!r} has no users")
            emb = embed_users(params, ds.auxiliary.take_rows(users))
            files["users"] = write_embeddings(out / "users.tsv", [ds.user_ids[u] for u in users], emb)
            inputs += [data / AUX_FILE, data / TARGET_FILE, data / SPLIT_FILE]
        sidecar = write_sidecar(out, params.d, ckpt.config.similarity, {k: v.name for k, v in files.items()})
        manifest = build_manifest(
            "export",
            {"split": split},
            inputs=inputs,
            outputs=[*files.values(), sidecar],
            config_hash=ckpt.config_hash,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    console.print(f"exported {len(files)} embedding tables to {out}")
