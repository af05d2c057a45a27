import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from implicitce.models.enums import SimilarityKind

SIDECAR_FILE = "embeddings.json"

_NOTES = {
    SimilarityKind.COSINE: "rows are not normalized; divide each by its L2 norm before inner-product search",
    SimilarityKind.DOT: "score with the raw inner product; rows are not normalized",
    SimilarityKind.EUCLIDEAN: "score is 1 - L2 distance; use an L2 index on the raw rows",
}


def write_embeddings(path: Path, ids: Sequence[str], vectors: np.ndarray) -> Path:
    """One `entity_id <TAB> v_0 ... v_{d-1}` line per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(ids) != len(vectors):
        raise ValueError(f"{len(ids)} ids for {len(vectors)} vectors")
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for entity, vec in zip(ids, vectors):
            writer.writerow([entity, *(repr(float(x)) for x in vec)])
    return path


def read_embeddings(path: Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row:
                ids.append(row[0])
                rows.append([float(x) for x in row[1:]])
    return ids, np.asarray(rows, dtype=np.float64)


def write_sidecar(directory: Path, dimension: int, similarity: SimilarityKind, files: dict[str, str]) -> Path:
    path = Path(directory) / SIDECAR_FILE
    sidecar = {
        "dimension": dimension,
        "similarity": similarity.value,
        "normalization": _NOTES[similarity],
        "files": files,
    }
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
