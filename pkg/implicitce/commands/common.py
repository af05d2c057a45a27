import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from implicitce.core.config import Settings, get_settings
from implicitce.core.errors import ImplicitCEError, NumericalError
from implicitce.models.enums import enum_from_value

logger = logging.getLogger("implicitce.cli")

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

console = Console()
err_console = Console(stderr=True)


def settings_of(ctx: Optional[typer.Context]) -> Settings:
    obj = ctx.find_root().obj if ctx is not None else None
    return obj if isinstance(obj, Settings) else get_settings()


def _validation_message(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err.get("loc", ())) or "value"
        parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


@contextmanager
def cli_errors() -> Iterator[None]:
    """Map library failures onto exit codes: 2 for bad input, 3 for numerical aborts."""
    try:
        yield
    except NumericalError as e:
        err_console.print(f"[red]numerical failure:[/red] {e}")
        raise typer.Exit(EXIT_NUMERICAL)
    except ValidationError as e:
        err_console.print(f"[red]invalid configuration:[/red] {_validation_message(e)}")
        raise typer.Exit(EXIT_USAGE)
    except (ImplicitCEError, FileNotFoundError) as e:
        err_console.print(f"[red]error:[/red] {e}")
        raise typer.Exit(EXIT_USAGE)


class Stopwatch:
    def __init__(self, record: bool):
        self.record = record
        self._start = time.perf_counter()

    @property
    def seconds(self) -> float:
        return round(time.perf_counter() - self._start, 3) if self.record else 0.0


def parse_list(text: Optional[str], cast=float) -> Optional[list]:
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise typer.BadParameter(f"expected a comma-separated list, got {text!r}")


def read_json_file(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: file not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ImplicitCEError(f"{path}: Line {e.lineno}: {e.msg}")
    if not isinstance(data, dict):
        raise ImplicitCEError(f"{path}: expected a JSON object")
    return data


def print_frame(df, title: Optional[str] = None, float_format: str = "{:.4g}") -> None:
    table = Table(title=title)
    for col in df.columns:
        table.add_column(str(col))
    for row in df.itertuples(index=False):
        table.add_row(*(float_format.format(v) if isinstance(v, float) else str(v) for v in row))
    console.print(table)


def parse_enum(enum_cls, value: str, flag: str):
    try:
        return enum_from_value(enum_cls, value)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint=flag)
