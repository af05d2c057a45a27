import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import pandas as pd

from implicitce.core.errors import DatasetError, ParseError
from implicitce.models.enums import Split

AUX_FILE = "aux.tsv"
TARGET_FILE = "target.tsv"
SPLIT_FILE = "split.tsv"


def _parse_count(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0:
        raise ValueError(text)
    return value


def read_interactions(path: Path) -> pd.DataFrame:
    """Read `user_id <TAB> item_id <TAB> count` lines into a frame.

    Blank lines are skipped, duplicate (user, item) lines are summed and
    zero counts are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")

    users: list[str] = []
    items: list[str] = []
    counts: list[float] = []
    with path.open("r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        line_no = 0
        for row in reader:
            line_no += 1
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(str(path), line_no, f"expected 3 tab-separated fields, got {len(row)}")
            user, item, count_s = (c.strip() for c in row)
            if not user or not item:
                raise ParseError(str(path), line_no, "empty user or item id")
            try:
                count = _parse_count(count_s)
            except ValueError:
                raise ParseError(str(path), line_no, f"count must be a nonnegative real, got {count_s!r}")
            users.append(user)
            items.append(item)
            counts.append(count)

    df = pd.DataFrame({"user": users, "item": items, "count": counts})
    if df.empty:
        return df
    df = df.groupby(["user", "item"], sort=False, as_index=False)["count"].sum()
    return df[df["count"] > 0].reset_index(drop=True)


def write_interactions(path: Path, rows: Iterable[tuple[str, str, float]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE)
        for user, item, count in rows:
            writer.writerow([user, item, repr(float(count))])


def read_split(path: Path, n_users: int) -> list[Split]:
    path = Path(path)
    labels: list[Split | None] = [None] * n_users
    with path.open("r", encoding="utf-8-sig", newline="") as fh:
        line_no = 0
        for raw in fh:
            line_no += 1
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(str(path), line_no, "expected `user_index <TAB> label`")
            try:
                idx = int(parts[0])
            except ValueError:
                raise ParseError(str(path), line_no, f"user index must be an integer, got {parts[0]!r}")
            try:
                label = Split(parts[1].strip())
            except ValueError:
                raise ParseError(str(path), line_no, f"unknown split label {parts[1]!r}")
            if not 0 <= idx < n_users:
                raise ParseError(str(path), line_no, f"user index {idx} out of range [0, {n_users})")
            if labels[idx] is not None:
                raise ParseError(str(path), line_no, f"user index {idx} listed twice")
            labels[idx] = label
    missing = [i for i, lab in enumerate(labels) if lab is None]
    if missing:
        raise DatasetError(f"{path}: no split label for user index {missing[0]} ({len(missing)} missing)")
    return [lab for lab in labels if lab is not None]


def write_split(path: Path, split: Sequence[Split]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for i, label in enumerate(split):
            fh.write(f"{i}\t{label.value}\n")


def read_affinities(path: Path) -> dict[str, float]:
    """Read `item_id <TAB> count` lines for a single new user; duplicates are summed."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    out: dict[str, float] = {}
    with path.open("r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        line_no = 0
        for row in reader:
            line_no += 1
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(str(path), line_no, f"expected 2 tab-separated fields, got {len(row)}")
            item, count_s = (c.strip() for c in row)
            if not item:
                raise ParseError(str(path), line_no, "empty item id")
            try:
                count = _parse_count(count_s)
            except ValueError:
                raise ParseError(str(path), line_no, f"count must be a nonnegative real, got {count_s!r}")
            out[item] = out.get(item, 0.0) + count
    return out
