import logging
from pathlib import Path
from typing import Optional

import pandas as pd
import typer
from rich.table import Table

from implicitce.commands.common import Stopwatch, cli_errors, console, parse_list, print_frame, settings_of
from implicitce.models.experiments import BiasDecaySpec, ConvergenceSpec, SampleErrSpec
from implicitce.services.experiments import (
    bias_slope,
    convergence_medians,
    describe_columns,
    run_bias_decay,
    run_convergence,
    run_sample_error,
)
from implicitce.storage.manifest import build_manifest, write_manifest

logger = logging.getLogger("implicitce.cli")

app = typer.Typer(help="Simulation studies; each writes one CSV plus manifest.json.", no_args_is_help=True)


def _spec_args(**kwargs) -> dict:
    return {k: v for k, v in kwargs.items() if v is not None}


def _write(out: Path, name: str, df: pd.DataFrame, command: str, spec, seconds: float) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    manifest = build_manifest(
        f"experiment {command}",
        spec.model_dump(mode="json"),
        outputs=[path],
        seed=spec.seed,
        wall_time_s=seconds,
    )
    write_manifest(out, manifest)
    return path


@app.command("convergence")
def convergence(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out"),
    outlier_rates: Optional[str] = typer.Option(None, "--outlier-rates", help="Comma-separated, e.g. 0,0.25,0.5"),
    losses: Optional[str] = typer.Option(None, "--losses", help="Subset of user-norm-mse,user-norm-rmse,per-user-corr"),
    trials: Optional[int] = typer.Option(None, "--trials"),
    max_steps: Optional[int] = typer.Option(None, "--max-steps"),
    aux_items: Optional[int] = typer.Option(None, "--aux-items"),
    target_items: Optional[int] = typer.Option(None, "--target-items"),
    reference_users: Optional[int] = typer.Option(None, "--reference-users"),
    seed: int = typer.Option(0, "--seed"),
):
    """Steps to convergence of a linear model as the outlier-user rate grows."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        spec = ConvergenceSpec(
            **_spec_args(
                outlier_rates=parse_list(outlier_rates, float),
                loss_set=parse_list(losses, str),
                trials=trials,
                max_steps=max_steps,
                n_aux_items=aux_items,
                n_target_items=target_items,
                reference_users=reference_users,
            ),
            seed=seed,
        )
        df = run_convergence(spec, threads=settings.threads)
        path = _write(out, "convergence.csv", df, "convergence", spec, watch.seconds)
    print_frame(convergence_medians(df), title="median steps to convergence")
    console.print(f"wrote {path}")


@app.command("sample-error")
def sample_error(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out"),
    sizes: Optional[str] = typer.Option(None, "--sizes", help="Comma-separated sample sizes"),
    population: Optional[int] = typer.Option(None, "--population"),
    users: Optional[int] = typer.Option(None, "--users"),
    trials: Optional[int] = typer.Option(None, "--trials"),
    seed: int = typer.Option(0, "--seed"),
):
    """Error of the sampled correlation and its gradient against the full population."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        spec = SampleErrSpec(
            **_spec_args(
                sample_sizes=parse_list(sizes, int),
                n_items_population=population,
                n_users=users,
                trials=trials,
            ),
            seed=seed,
        )
        df = run_sample_error(spec, threads=settings.threads)
        path = _write(out, "sample_error.csv", df, "sample-error", spec, watch.seconds)
    print_frame(df, title="sampled correlation error")
    console.print(f"wrote {path}")


@app.command("bias-decay")
def bias_decay(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out"),
    items: Optional[int] = typer.Option(None, "--items"),
    users: Optional[int] = typer.Option(None, "--users"),
    sizes: Optional[str] = typer.Option(None, "--sizes", help="Comma-separated sample sizes"),
    trials: Optional[int] = typer.Option(None, "--trials"),
    seed: int = typer.Option(0, "--seed"),
):
    """Bias of the rescaled sampled gradient as the item sample grows."""
    settings = settings_of(ctx)
    watch = Stopwatch(settings.record_timing)
    with cli_errors():
        spec = BiasDecaySpec(
            **_spec_args(n_items=items, n_users=users, sizes=parse_list(sizes, int), trials=trials),
            seed=seed,
        )
        df = run_bias_decay(spec, threads=settings.threads)
        path = _write(out, "bias_decay.csv", df, "bias-decay", spec, watch.seconds)
    print_frame(df, title="sampled gradient bias")
    try:
        console.print(f"log-log slope {bias_slope(df, spec.n_items):.3f}")
    except ValueError:
        pass
    console.print(f"wrote {path}")


@app.command("columns")
def columns():
    """Print the column layout of every experiment CSV (1-based, for gnuplot `using`)."""
    for name, cols in describe_columns().items():
        table = Table(title=name)
        table.add_column("#", justify="right")
        table.add_column("column")
        table.add_column("meaning")
        for i, col, meaning in cols:
            table.add_row(str(i), col, meaning)
        console.print(table)
