import logging
from pathlib import Path

import typer

from implicitce.commands.common import Stopwatch, cli_errors, console, settings_of
from implicitce.models.data import SyntheticSpec
from implicitce.services.dataset import dblp_to_tsv, export_tsv, generate_synthetic, split_users
from implicitce.storage.manifest import build_manifest, write_manifest

logger = logging.getLogger("implicitce.cli")


def generate(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out", help="Directory for aux.tsv, target.tsv and split.tsv"),
    users: int = typer.Option(1000, "--users", min=1),
    aux_items: int = typer.Option(50, "--aux-items", min=1),
    target_items: int = typer.Option(50, "--target-items", min=1),
    noise: float = typer.Option(0.0, "--noise", min=0.0, help="Std of additive target noise"),
    outlier_rate: float = typer.Option(0.0, "--outlier-rate", min=0.0, max=1.0),
    outlier_magnitude: float = typer.Option(100.0, "--outlier-magnitude"),
    val_users: int = typer.Option(0, "--val-users", min=0),
    holdout_users: int = typer.Option(0, "--holdout-users", min=0),
    seed: int = typer.Option(0, "--seed"),
):
    """Generate a synthetic cross-domain dataset with a linear aux -> target map."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        spec = SyntheticSpec(
            n_users=users,
            n_aux_items=aux_items,
            n_target_items=target_items,
            noise_scale=noise,
            outlier_rate=outlier_rate,
            outlier_magnitude=outlier_magnitude,
            seed=seed,
        )
        ds = generate_synthetic(spec)
        if val_users or holdout_users:
            ds = split_users(ds, val_users, holdout_users, seed)
        paths = export_tsv(ds, out)
        manifest = build_manifest(
            "generate",
            spec.model_dump(mode="json") | {"val_users": val_users, "holdout_users": holdout_users},
            outputs=paths,
            seed=seed,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    console.print(f"wrote {ds.n_users} users to {out} ({ds.split_counts()})")


def ingest_dblp(
    ctx: typer.Context,
    source: Path = typer.Argument(..., help="DBLP citation dump, one JSON paper per line"),
    out: Path = typer.Option(..., "--out"),
    split_year: int = typer.Option(2013, "--split-year"),
):
    """Convert a DBLP dump into coauthor (auxiliary) and venue (target) counts."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        if not source.exists():
            raise FileNotFoundError(f"{source}: file not found")
        paths = dblp_to_tsv(source, out, split_year)
        manifest = build_manifest(
            "ingest-dblp",
            {"split_year": split_year},
            inputs=[source],
            outputs=paths,
            wall_time_s=watch.seconds,
        )
        write_manifest(out, manifest)
    console.print(f"wrote {', '.join(str(p) for p in paths)}")
