from typing import Optional

import typer

from implicitce.commands import data, evaluate, experiment, train
from implicitce.core.config import get_settings
from implicitce.core.logging import setup_logging

app = typer.Typer(
    name="implicitce",
    help="Cross-domain co-embeddings trained by maximizing per-user correlation.",
    no_args_is_help=True,
    add_completion=False,
)


@app.callback()
def main(
    ctx: typer.Context,
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR"),
    threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Worker threads for evaluation and experiments"),
    no_timing: bool = typer.Option(False, "--no-timing", help="Write 0 for wall-clock fields so reruns are byte-identical"),
):
    update = {k: v for k, v in {"log_level": log_level, "threads": threads}.items() if v is not None}
    if no_timing:
        update["record_timing"] = False
    settings = get_settings().model_copy(update=update)
    setup_logging(settings.log_level)
    ctx.obj = settings


app.command("generate")(data.generate)
app.command("ingest-dblp")(data.ingest_dblp)
app.command("train")(train.train)
app.command("search")(train.search)
app.command("evaluate")(evaluate.evaluate)
app.command("recommend")(evaluate.recommend)
app.command("export")(evaluate.export)
app.add_typer(experiment.app, name="experiment")


if __name__ == "__main__":
    app()
