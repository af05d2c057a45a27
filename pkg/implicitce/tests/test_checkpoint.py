import json
import struct

import numpy as np
import pytest

from implicitce.core.errors import CheckpointError
from implicitce.models.enums import OptimizerKind
from implicitce.storage.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from implicitce.services.trainer import train


@pytest.fixture
def trained(small_ds, tiny_cfg):
    return train(small_ds, tiny_cfg.model_copy(update={"steps": 10, "biases": True}), record_timing=False)


def test_round_trip_in_double_precision(tmp_path, trained):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", trained, precision="f8"))
    for name, t in trained.params.tensors().items():
        np.testing.assert_array_equal(loaded.params.tensors()[name], t, err_msg=name)
    for name, t in trained.optimizer_state.items():
        np.testing.assert_array_equal(loaded.optimizer_state[name], t)
    assert loaded.config == trained.config
    assert loaded.config_hash == trained.config_hash
    assert (loaded.step, loaded.best_step, loaded.optimizer_t) == (trained.step, trained.best_step, trained.optimizer_t)
    assert loaded.history == trained.history
    assert loaded.target_item_ids == trained.target_item_ids


def test_single_precision_is_close(tmp_path, trained):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", trained))
    for name, t in trained.best_params.tensors().items():
        np.testing.assert_allclose(loaded.best_params.tensors()[name], t, rtol=1e-6, atol=1e-7)
    assert loaded.params.aux_embeddings.dtype == np.float64


def test_sgd_checkpoint_has_no_optimizer_tensors(tmp_path, small_ds, tiny_cfg):
    ckpt = train(small_ds, tiny_cfg.model_copy(update={"steps": 2, "optimizer": OptimizerKind.SGD}))
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", ckpt))
    assert loaded.optimizer_state == {}
    assert loaded.config.optimizer == OptimizerKind.SGD


def test_save_is_byte_stable(tmp_path, trained):
    a = save_checkpoint(tmp_path / "a.ckpt", trained).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", trained).read_bytes()
    assert a == b
    assert a.startswith(MAGIC)


def test_unknown_precision(tmp_path, trained):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.ckpt", trained, precision="f2")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path, trained):
    path = save_checkpoint(tmp_path / "m.ckpt", trained)
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, len(MAGIC), FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_tensors(tmp_path, trained):
    path = save_checkpoint(tmp_path / "m.ckpt", trained)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_tampered_config_fails_the_hash_check(tmp_path, trained):
    path = save_checkpoint(tmp_path / "m.ckpt", trained)
    data = path.read_bytes()
    head_len = struct.unpack_from("<I", data, len(MAGIC) + 4)[0]
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + head_len])
    header["config"]["learning_rate"] = 0.5
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.write_bytes(data[:len(MAGIC)] + struct.pack("<II", FORMAT_VERSION, len(head)) + head + data[start + head_len:])
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)
