import json
import logging
from collections import Counter, defaultdict
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from implicitce.core.errors import DatasetError, ParseError
from implicitce.models.data import CrossDomainDataset, InteractionMatrix, SyntheticSpec
from implicitce.models.enums import Preprocess, Split
from implicitce.storage.tsv import (
    AUX_FILE,
    SPLIT_FILE,
    TARGET_FILE,
    read_interactions,
    read_split,
    write_interactions,
    write_split,
)

logger = logging.getLogger(__name__)


def _build(
    auxiliary: InteractionMatrix,
    target: InteractionMatrix,
    user_ids: list[str],
    aux_item_ids: list[str],
    target_item_ids: list[str],
    split: Optional[list[Split]] = None,
    outliers: Optional[np.ndarray] = None,
) -> CrossDomainDataset:
    try:
        return CrossDomainDataset(
            auxiliary=auxiliary,
            target=target,
            split=split if split is not None else [Split.TRAIN] * auxiliary.n_users,
            user_ids=user_ids,
            aux_item_ids=aux_item_ids,
            target_item_ids=target_item_ids,
            outliers=outliers,
        )
    except ValidationError as e:
        raise DatasetError(f"invalid dataset: {e.errors()[0]['msg']}") from e


def _to_matrix(df: pd.DataFrame, user_ids: list[str], item_ids: list[str]) -> InteractionMatrix:
    users = pd.Categorical(df["user"], categories=user_ids).codes
    items = pd.Categorical(df["item"], categories=item_ids).codes
    return InteractionMatrix.from_triples(
        users, items, df["count"].to_numpy(), shape=(len(user_ids), len(item_ids))
    )


def ingest_tsv(aux_path: Path, target_path: Path, min_aux: int = 1, min_target: int = 1) -> CrossDomainDataset:
    """Load auxiliary and target interaction TSVs into a dense-indexed dataset.

    Users are kept when they appear in both files with at least `min_aux`
    auxiliary and `min_target` target entries. Users and items are indexed
    in lexicographic order of their original ids.
    """
    aux = read_interactions(aux_path)
    tgt = read_interactions(target_path)

    aux_n = aux.groupby("user").size() if not aux.empty else pd.Series(dtype=int)
    tgt_n = tgt.groupby("user").size() if not tgt.empty else pd.Series(dtype=int)
    both = set(aux_n.index) & set(tgt_n.index)
    only_one = len(set(aux_n.index) ^ set(tgt_n.index))
    if only_one:
        logger.warning("%d users present in only one domain were excluded", only_one)

    keep = sorted(u for u in both if aux_n[u] >= min_aux and tgt_n[u] >= min_target)
    below = len(both) - len(keep)
    if below:
        logger.info("%d users below the min_aux=%d / min_target=%d thresholds were excluded", below, min_aux, min_target)
    if not keep:
        raise DatasetError("no users left after filtering")

    kept = set(keep)
    aux = aux[aux["user"].isin(kept)]
    tgt = tgt[tgt["user"].isin(kept)]
    aux_item_ids = sorted(aux["item"].unique())
    target_item_ids = sorted(tgt["item"].unique())

    ds = _build(
        _to_matrix(aux, keep, aux_item_ids),
        _to_matrix(tgt, keep, target_item_ids),
        list(keep),
        aux_item_ids,
        target_item_ids,
    )
    logger.info(
        "ingested %d users, %d auxiliary items, %d target items",
        ds.n_users, ds.auxiliary.n_items, ds.target.n_items,
    )
    return ds


def _ids(prefix: str, n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _streams(seed: int) -> list[np.random.Generator]:
    # independent streams: linear map, auxiliary draws, noise, outliers
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def synthetic_linear_map(spec: SyntheticSpec) -> np.ndarray:
    """The fixed nonnegative n_aux_items x n_target_items map used by `generate_synthetic`."""
    rng = _streams(spec.seed)[0]
    return rng.uniform(0.0, 1.0, size=(spec.n_aux_items, spec.n_target_items)) / spec.n_aux_items


def generate_synthetic(spec: SyntheticSpec) -> CrossDomainDataset:
    _, aux_rng, noise_rng, outlier_rng = _streams(spec.seed)
    linear_map = synthetic_linear_map(spec)

    x = aux_rng.normal(spec.aux_mean, spec.aux_std, size=(spec.n_users, spec.n_aux_items))
    np.maximum(x, 0.0, out=x)
    y = x @ linear_map
    noise = noise_rng.standard_normal(size=y.shape)
    if spec.noise_scale > 0:
        y = np.maximum(y + spec.noise_scale * noise, 0.0)

    outliers = outlier_rng.random(spec.n_users) < spec.outlier_rate
    n_out = int(outliers.sum())
    if n_out:
        x[outliers] *= spec.outlier_magnitude
        high = y[outliers].max(axis=1, keepdims=True)
        high[high <= 0] = 1.0
        y[outliers] = outlier_rng.uniform(0.0, 1.0, size=(n_out, spec.n_target_items)) * high
    logger.debug("generated %d users (%d outliers)", spec.n_users, n_out)

    return _build(
        InteractionMatrix.from_dense(x),
        InteractionMatrix.from_dense(y),
        _ids("u", spec.n_users),
        _ids("a", spec.n_aux_items),
        _ids("b", spec.n_target_items),
        outliers=outliers,
    )


def split_users(ds: CrossDomainDataset, n_val: int, n_holdout: int, seed: int) -> CrossDomainDataset:
    if n_val < 0 or n_holdout < 0:
        raise DatasetError("split sizes must be nonnegative")
    if n_val + n_holdout >= ds.n_users:
        raise DatasetError(
            f"n_val + n_holdout = {n_val + n_holdout} leaves no training users out of {ds.n_users}"
        )
    perm = np.random.default_rng(seed).permutation(ds.n_users)
    labels = [Split.TRAIN] * ds.n_users
    for u in perm[:n_val]:
        labels[int(u)] = Split.VALIDATION
    for u in perm[n_val:n_val + n_holdout]:
        labels[int(u)] = Split.HOLDOUT
    return ds.model_copy(update={"split": labels})


def preprocess(ds: CrossDomainDataset, kind: Preprocess) -> CrossDomainDataset:
    if kind == Preprocess.RAW:
        return ds
    return ds.model_copy(
        update={"auxiliary": ds.auxiliary.map_values(np.log1p), "target": ds.target.map_values(np.log1p)}
    )


def _rows(matrix: InteractionMatrix, user_ids: list[str], item_ids: list[str]):
    m = matrix.counts
    for u in range(matrix.n_users):
        lo, hi = m.indptr[u], m.indptr[u + 1]
        for j, c in zip(m.indices[lo:hi], m.data[lo:hi]):
            yield user_ids[u], item_ids[j], c


def export_tsv(ds: CrossDomainDataset, directory: Path) -> list[Path]:
    """Write the canonical aux/target/split files, sorted by (user, item) index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    aux_path, target_path, split_path = directory / AUX_FILE, directory / TARGET_FILE, directory / SPLIT_FILE
    write_interactions(aux_path, _rows(ds.auxiliary, ds.user_ids, ds.aux_item_ids))
    write_interactions(target_path, _rows(ds.target, ds.user_ids, ds.target_item_ids))
    write_split(split_path, ds.split)
    return [aux_path, target_path, split_path]


def load_dataset(
    directory: Path,
    min_aux: int = 1,
    min_target: int = 1,
    n_val: int = 0,
    n_holdout: int = 0,
    seed: int = 0,
) -> CrossDomainDataset:
    """Ingest a dataset directory. `split.tsv` indexes users in the unfiltered
    ingest order, so labels are resolved before the `min_aux`/`min_target`
    thresholds drop users.
    """
    directory = Path(directory)
    aux_path, target_path, split_path = directory / AUX_FILE, directory / TARGET_FILE, directory / SPLIT_FILE
    ds = ingest_tsv(aux_path, target_path, min_aux, min_target)
    if split_path.exists():
        if min_aux > 1 or min_target > 1:
            full = ingest_tsv(aux_path, target_path)
            by_id = dict(zip(full.user_ids, read_split(split_path, full.n_users)))
            labels = [by_id[u] for u in ds.user_ids]
        else:
            labels = read_split(split_path, ds.n_users)
        return ds.model_copy(update={"split": labels})
    if n_val or n_holdout:
        return split_users(ds, n_val, n_holdout, seed)
    return ds


def dblp_to_tsv(source: Path, directory: Path, split_year: int = 2013) -> list[Path]:
    """Turn a DBLP citation dump (one JSON paper per line, with `authors`,
    `venue` and `year`) into auxiliary coauthor counts before `split_year`
    and target venue counts from `split_year` on.
    """
    source = Path(source)
    coauthors: dict[str, Counter] = defaultdict(Counter)
    venues: dict[str, Counter] = defaultdict(Counter)
    with source.open("r", encoding="utf-8") as fh:
        line_no = 0
        for line in fh:
            line_no += 1
            if not line.strip():
                continue
            try:
                paper = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(source), line_no, f"invalid JSON: {e.msg}")
            year = paper.get("year")
            authors = [a.get("name", "") if isinstance(a, dict) else str(a) for a in paper.get("authors") or []]
            authors = [a.strip() for a in authors if a and a.strip()]
            if year is None or not authors:
                continue
            if int(year) < split_year:
                for a in authors:
                    for b in authors:
                        if a != b:
                            coauthors[a][b] += 1
            else:
                venue = paper.get("venue") or ""
                if isinstance(venue, dict):
                    venue = venue.get("raw") or ""
                venue = str(venue).strip()
                if venue:
                    for a in authors:
                        venues[a][venue] += 1

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    aux_path, target_path = directory / AUX_FILE, directory / TARGET_FILE
    write_interactions(aux_path, ((a, b, c) for a in sorted(coauthors) for b, c in sorted(coauthors[a].items())))
    write_interactions(target_path, ((a, v, c) for a in sorted(venues) for v, c in sorted(venues[a].items())))
    logger.info("wrote %d auxiliary and %d target users", len(coauthors), len(venues))
    return [aux_path, target_path]
