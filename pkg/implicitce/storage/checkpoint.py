"""Versioned binary checkpoint container.

Layout: magic, uint32 LE format version, uint32 LE header length, a UTF-8
JSON header, then the raw little-endian tensors back to back. The header's
tensor table gives every tensor's name, shape and byte offset relative to
the end of the header.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import ValidationError

from implicitce.core.errors import CheckpointError, ModelError
from implicitce.models.config import TrainConfig
from implicitce.services.model import ModelParams
from implicitce.services.trainer import Checkpoint

logger = logging.getLogger(__name__)

MAGIC = b"ICECKPT\x00"
FORMAT_VERSION = 1
CHECKPOINT_FILE = "model.ckpt"

Precision = Literal["f4", "f8"]
_DTYPES = {"f4": "<f4", "f8": "<f8"}

_PARAM_GROUPS = ("params", "best")


def _tensor_table(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, t in ckpt.params.tensors().items():
        out[f"params.{name}"] = t
    for name, t in ckpt.best_params.tensors().items():
        out[f"best.{name}"] = t
    for name, t in ckpt.optimizer_state.items():
        out[f"optimizer.{name}"] = t
    return out


def save_checkpoint(path: Path, ckpt: Checkpoint, precision: Precision = "f4") -> Path:
    if precision not in _DTYPES:
        raise CheckpointError(f"unknown precision {precision!r}; use f4 or f8")
    dtype = np.dtype(_DTYPES[precision])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = _tensor_table(ckpt)
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        raw = np.ascontiguousarray(t, dtype=dtype).tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype.str,
        "config": ckpt.config.model_dump(mode="json"),
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "best_step": ckpt.best_step,
        "best_score": ckpt.best_score,
        "optimizer": {"kind": ckpt.config.optimizer.value, "t": ckpt.optimizer_t},
        "layer_specs": ckpt.params.layer_specs(),
        "history": ckpt.history,
        "aux_item_ids": ckpt.aux_item_ids,
        "target_item_ids": ckpt.target_item_ids,
        "filters": {"min_aux": ckpt.min_aux, "min_target": ckpt.min_target},
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    logger.info("wrote checkpoint %s (step %d, %s)", path, ckpt.step, dtype.str)
    return path


def _read_header(data: bytes, path: Path) -> tuple[dict, int]:
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    if len(data) < start + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})")
    return header, start + head_len


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: file not found")
    data = path.read_bytes()
    header, body = _read_header(data, path)
    dtype = np.dtype(header["dtype"])
    filters = header.get("filters", {})

    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "best": {}, "optimizer": {}}
    for entry in header["tensors"]:
        lo = body + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=dtype).astype(np.float64).reshape(entry["shape"])
        group, name = entry["name"].split(".", 1)
        groups[group][name] = arr

    try:
        config = TrainConfig.model_validate(header["config"])
        params = ModelParams.from_tensors(groups["params"], header["layer_specs"])
        best = ModelParams.from_tensors(groups["best"], header["layer_specs"])
    except (ValidationError, ModelError, KeyError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint ({e})")

    ckpt = Checkpoint(
        params=params,
        best_params=best,
        config=config,
        step=int(header["step"]),
        best_step=int(header["best_step"]),
        best_score=header.get("best_score"),
        optimizer_t=int(header["optimizer"]["t"]),
        optimizer_state=groups["optimizer"],
        history=list(header["history"]),
        aux_item_ids=list(header["aux_item_ids"]),
        target_item_ids=list(header["target_item_ids"]),
        min_aux=int(filters.get("min_aux", 1)),
        min_target=int(filters.get("min_target", 1)),
    )
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    return ckpt
