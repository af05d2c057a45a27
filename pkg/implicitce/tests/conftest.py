import numpy as np
import pytest
from typer.testing import CliRunner

from implicitce.models.config import TrainConfig
from implicitce.models.data import SyntheticSpec
from implicitce.services.dataset import export_tsv, generate_synthetic, split_users


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size simulation runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_ds():
    ds = generate_synthetic(SyntheticSpec(n_users=60, n_aux_items=12, n_target_items=15, noise_scale=0.5, seed=3))
    return split_users(ds, n_val=10, n_holdout=10, seed=0)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        d_aux=8,
        d=8,
        hidden_sizes=[16],
        n_su=16,
        n_si=10,
        steps=20,
        eval_every=10,
        dropout=0.0,
        learning_rate=0.01,
        seed=1,
    )


@pytest.fixture
def data_dir(tmp_path, small_ds):
    directory = tmp_path / "data"
    export_tsv(small_ds, directory)
    return directory


@pytest.fixture
def runner():
    return CliRunner()
