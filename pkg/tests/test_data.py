from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgroup_gda.data import Dataset, kfold_indices, load_csv, split_indices, train_test_split, write_csv
from subgroup_gda.errors import DomainError, ParameterError, ParseError, SchemaError


def _toy(n=20, d=3, seed=0, aux=True):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    a = rng.integers(0, 2, n)
    y = rng.standard_normal(n)
    extra = {"true_ite": rng.standard_normal(n)} if aux else {}
    return Dataset(X, a, y, extra)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_counts_rows_and_columns(tmp_path):
    ds = _toy(n=5000, d=10)
    p = tmp_path / "d.csv"
    write_csv(ds, p)
    back = load_csv(p)
    assert (back.n, back.d) == (5000, 10)
    assert back.feature_names == tuple(f"x{j}" for j in range(1, 11))


def test_round_trip_is_exact(tmp_path):
    ds = _toy(n=50, d=4)
    p = tmp_path / "d.csv"
    write_csv(ds, p)
    back = load_csv(p)
    assert ds.equals(back)
    assert np.array_equal(back.aux["true_ite"], ds.aux["true_ite"])


def test_missing_schema_column(tmp_path):
    p = _write(tmp_path / "d.csv", "x1,x2,a,y\n1,2,0,1\n")
    with pytest.raises(SchemaError):
        load_csv(p, schema={"features": ["x1", "w"]})


def test_non_numeric_cell_reports_location(tmp_path):
    p = _write(tmp_path / "d.csv", "x1,a,y\n1,0,1\nfoo,1,2\n")
    with pytest.raises(ParseError) as ei:
        load_csv(p)
    assert "line 3" in str(ei.value) and "x1" in str(ei.value)


def test_treatment_out_of_domain_names_row(tmp_path):
    p = _write(tmp_path / "d.csv", "x1,a,y\n1,0,1\n2,2,1\n")
    with pytest.raises(DomainError) as ei:
        load_csv(p)
    assert "line 3" in str(ei.value)


def test_empty_file_is_schema_error(tmp_path):
    p = _write(tmp_path / "d.csv", "")
    with pytest.raises(SchemaError):
        load_csv(p)


def test_dataset_rejects_bad_treatment():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 1)), [0, 3], [0.0, 1.0])


def test_dataset_is_read_only():
    ds = _toy()
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


@pytest.mark.parametrize("n,frac,sizes", [(5000, 0.5, (2500, 2500)), (1000, 0.3, (700, 300))])
def test_split_sizes(n, frac, sizes):
    sp = split_indices(n, frac, seed=1)
    assert (sp.train.size, sp.test.size) == sizes


def test_split_is_deterministic():
    ds = _toy(n=40)
    a_tr, a_te = train_test_split(ds, 0.5, 7)
    b_tr, b_te = train_test_split(ds, 0.5, 7)
    assert a_tr.features.tobytes() == b_tr.features.tobytes()
    assert a_te.features.tobytes() == b_te.features.tobytes()


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_out_of_range(frac):
    with pytest.raises(ParameterError):
        split_indices(10, frac, 0)


@given(n=st.integers(2, 400), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_split_partitions_rows(n, frac, seed):
    try:
        sp = split_indices(n, frac, seed)
    except ParameterError:
        return
    assert np.intersect1d(sp.train, sp.test).size == 0
    assert np.array_equal(np.union1d(sp.train, sp.test), np.arange(n))


def test_kfold_exact_division():
    folds = kfold_indices(10, 5, 0)
    assert [f.test.size for f in folds] == [2] * 5
    assert np.array_equal(np.sort(np.concatenate([f.test for f in folds])), np.arange(10))


def test_kfold_remainder():
    folds = kfold_indices(11, 5, 0)
    assert sorted(f.test.size for f in folds) == [2, 2, 2, 2, 3]


@pytest.mark.parametrize("k", [0, 1, 12])
def test_kfold_bad_k(k):
    with pytest.raises(ParameterError):
        kfold_indices(11, k, 0)


@given(n=st.integers(2, 300), k=st.integers(2, 10), seed=st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_kfold_tests_partition_rows(n, k, seed):
    if k > n:
        return
    folds = kfold_indices(n, k, seed)
    tests = np.concatenate([f.test for f in folds])
    assert np.array_equal(np.sort(tests), np.arange(n))
    for f in folds:
        assert np.intersect1d(f.train, f.test).size == 0
        assert f.train.size + f.test.size == n
