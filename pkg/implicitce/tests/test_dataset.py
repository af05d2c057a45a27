import json

import numpy as np
import pytest
from pydantic import ValidationError

from implicitce.core.errors import DatasetError, ParseError
from implicitce.models.data import InteractionMatrix, SyntheticSpec
from implicitce.models.enums import Preprocess, Split
from implicitce.services.dataset import (
    dblp_to_tsv,
    export_tsv,
    generate_synthetic,
    ingest_tsv,
    load_dataset,
    preprocess,
    split_users,
    synthetic_linear_map,
)
from implicitce.storage.tsv import read_affinities, read_interactions


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_ingest_reindexes_lexicographically(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u2\ta1\t3", "u1\ta2\t1", "u1\ta1\t2"])
    tgt = _write(tmp_path / "target.tsv", ["u1\tb1\t5", "u2\tb2\t1"])
    ds = ingest_tsv(aux, tgt)
    assert ds.user_ids == ["u1", "u2"]
    assert ds.aux_item_ids == ["a1", "a2"]
    assert ds.auxiliary.dense_rows([0, 1]).tolist() == [[2.0, 1.0], [3.0, 0.0]]
    assert ds.target.dense_rows([0, 1]).tolist() == [[5.0, 0.0], [0.0, 1.0]]


def test_ingest_sums_duplicates_and_drops_zeros(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u1\ta1\t1.5", "u1\ta1\t2.5", "u1\ta2\t0"])
    tgt = _write(tmp_path / "target.tsv", ["u1\tb1\t1"])
    ds = ingest_tsv(aux, tgt)
    assert ds.aux_item_ids == ["a1"]
    assert ds.auxiliary.row(0)[1].tolist() == [4.0]


def test_users_in_one_domain_only_are_excluded(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u1\ta1\t1", "u3\ta1\t1"])
    tgt = _write(tmp_path / "target.tsv", ["u1\tb1\t1", "u2\tb1\t1"])
    ds = ingest_tsv(aux, tgt)
    assert ds.user_ids == ["u1"]


def test_parse_error_names_the_line(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u1\ta1\t1", "", "u1\ta2\t-3"])
    with pytest.raises(ParseError) as exc:
        read_interactions(aux)
    assert exc.value.line_no == 3
    assert "Line 3" in str(exc.value)


def test_wrong_field_count_is_a_parse_error(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u1\ta1"])
    with pytest.raises(ParseError, match="Line 1"):
        read_interactions(aux)


def test_missing_file_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        ingest_tsv(tmp_path / "nope.tsv", tmp_path / "nope2.tsv")


def test_min_thresholds_filter_users(tmp_path):
    aux = _write(tmp_path / "aux.tsv", ["u1\ta1\t1", "u1\ta2\t1", "u2\ta1\t1"])
    tgt = _write(tmp_path / "target.tsv", ["u1\tb1\t1", "u2\tb1\t1"])
    assert ingest_tsv(aux, tgt, min_aux=2).user_ids == ["u1"]
    with pytest.raises(DatasetError):
        ingest_tsv(aux, tgt, min_aux=3)


def test_lookup_block_matches_dense():
    dense = np.array([[0, 2, 0, 1], [3, 0, 0, 0], [0, 0, 5, 4]], dtype=float)
    m = InteractionMatrix.from_dense(dense)
    items = np.array([3, 0, 2])
    users = np.array([2, 0])
    np.testing.assert_array_equal(m.lookup_block(users, items), dense[np.ix_(users, items)])


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(n_users=30, n_aux_items=6, n_target_items=7, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert (a.auxiliary.counts != b.auxiliary.counts).nnz == 0
    assert (a.target.counts != b.target.counts).nnz == 0


def test_noiseless_synthetic_is_linear():
    spec = SyntheticSpec(n_users=20, n_aux_items=5, n_target_items=4, seed=2)
    ds = generate_synthetic(spec)
    x = ds.auxiliary.dense_rows(np.arange(20))
    y = ds.target.dense_rows(np.arange(20))
    np.testing.assert_allclose(y, x @ synthetic_linear_map(spec), rtol=1e-12)


def test_outlier_rate_one_marks_every_user():
    ds = generate_synthetic(SyntheticSpec(n_users=10, n_aux_items=4, n_target_items=4, outlier_rate=1.0, seed=0))
    assert ds.outliers.all()
    clean = generate_synthetic(SyntheticSpec(n_users=10, n_aux_items=4, n_target_items=4, seed=0))
    assert ds.auxiliary.counts.sum() > 50 * clean.auxiliary.counts.sum()


def test_split_users_sizes_and_disjointness(small_ds):
    counts = small_ds.split_counts()
    assert counts == {"train": 40, "validation": 10, "holdout": 10}
    sets = [set(small_ds.users_in(s).tolist()) for s in Split]
    assert sum(len(s) for s in sets) == small_ds.n_users
    assert not (sets[0] & sets[1]) and not (sets[1] & sets[2])


def test_split_users_needs_training_users(small_ds):
    with pytest.raises(DatasetError):
        split_users(small_ds, 30, 30, seed=0)


def test_export_then_load_reproduces_dataset(tmp_path, small_ds):
    export_tsv(small_ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.user_ids == small_ds.user_ids
    assert loaded.split == small_ds.split
    assert (loaded.auxiliary.counts != small_ds.auxiliary.counts).nnz == 0
    assert (loaded.target.counts != small_ds.target.counts).nnz == 0


def test_stored_split_applies_before_filtering(tmp_path):
    _write(tmp_path / "aux.tsv", ["u1\ta1\t1", "u1\ta2\t1", "u2\ta1\t4", "u3\ta1\t2", "u3\ta3\t1"])
    _write(tmp_path / "target.tsv", ["u1\tb1\t1", "u2\tb1\t2", "u3\tb2\t3"])
    _write(tmp_path / "split.tsv", ["0\tholdout", "1\tvalidation", "2\ttrain"])
    assert load_dataset(tmp_path).split == [Split.HOLDOUT, Split.VALIDATION, Split.TRAIN]
    filtered = load_dataset(tmp_path, min_aux=2)
    assert filtered.user_ids == ["u1", "u3"]
    assert filtered.split == [Split.HOLDOUT, Split.TRAIN]
    assert filtered.aux_item_ids == ["a1", "a2", "a3"]


def test_stored_split_must_label_every_user(tmp_path):
    _write(tmp_path / "aux.tsv", ["u1\ta1\t1", "u2\ta1\t4"])
    _write(tmp_path / "target.tsv", ["u1\tb1\t1", "u2\tb1\t2"])
    _write(tmp_path / "split.tsv", ["0\ttrain"])
    with pytest.raises(DatasetError, match="user index 1"):
        load_dataset(tmp_path)
    _write(tmp_path / "split.tsv", ["0\ttrain", "1\ttest"])
    with pytest.raises(ParseError) as exc:
        load_dataset(tmp_path)
    assert exc.value.line_no == 2


def test_log1p_preserves_sparsity(small_ds):
    out = preprocess(small_ds, Preprocess.LOG1P)
    assert out.target.counts.nnz == small_ds.target.counts.nnz
    np.testing.assert_allclose(out.target.counts.data, np.log1p(small_ds.target.counts.data))
    assert preprocess(small_ds, Preprocess.RAW) is small_ds


def test_read_affinities_sums_duplicates(tmp_path):
    path = _write(tmp_path / "user.tsv", ["a1\t2", "a2\t1", "a1\t3"])
    assert read_affinities(path) == {"a1": 5.0, "a2": 1.0}


def test_dblp_conversion(tmp_path):
    papers = [
        {"authors": [{"name": "Ann"}, {"name": "Bob"}], "venue": {"raw": "KDD"}, "year": 2010},
        {"authors": ["Ann", "Cy"], "venue": "KDD", "year": 2012},
        {"authors": ["Ann"], "venue": "ICML", "year": 2014},
        {"authors": ["Bob", "Ann"], "venue": "KDD", "year": 2015},
    ]
    source = tmp_path / "dblp.jsonl"
    source.write_text("\n".join(json.dumps(p) for p in papers) + "\n", encoding="utf-8")
    dblp_to_tsv(source, tmp_path / "out", split_year=2013)
    aux = read_interactions(tmp_path / "out" / "aux.tsv")
    tgt = read_interactions(tmp_path / "out" / "target.tsv")
    ann_aux = dict(zip(aux[aux.user == "Ann"].item, aux[aux.user == "Ann"]["count"]))
    assert ann_aux == {"Bob": 1.0, "Cy": 1.0}
    ann_tgt = dict(zip(tgt[tgt.user == "Ann"].item, tgt[tgt.user == "Ann"]["count"]))
    assert ann_tgt == {"ICML": 1.0, "KDD": 1.0}


def test_outlier_count_is_binomial():
    spec = SyntheticSpec(n_users=10_000, n_aux_items=2, n_target_items=2, outlier_rate=0.25, seed=11)
    n_out = int(generate_synthetic(spec).outliers.sum())
    mean, sd = 2500.0, (10_000 * 0.25 * 0.75) ** 0.5
    assert abs(n_out - mean) <= 3 * sd


def test_split_arithmetic_and_determinism():
    ds = generate_synthetic(SyntheticSpec(n_users=100, n_aux_items=3, n_target_items=3, seed=0))
    a = split_users(ds, n_val=10, n_holdout=10, seed=4)
    b = split_users(ds, n_val=10, n_holdout=10, seed=4)
    assert a.split_counts()["train"] == 80
    assert a.split == b.split
    with pytest.raises(DatasetError):
        split_users(ds, n_val=50, n_holdout=50, seed=0)


@pytest.mark.parametrize("field", [{"aux_mean": 0.0}, {"aux_mean": -3.0}, {"outlier_magnitude": 1.0}])
def test_synthetic_spec_rejects_degenerate_draws(field):
    with pytest.raises(ValidationError):
        SyntheticSpec(n_users=5, n_aux_items=2, n_target_items=2, **field)
