import json

import numpy as np
import pytest
from scipy import stats

from dkgp.data import (
    Dataset,
    additive_data,
    ecdf_fit,
    ecdf_transform,
    load_csv,
    load_registry,
    partition,
    rmse,
    step_data,
)
from dkgp.errors import DimensionMismatch, EmptyFile, ParseError, RaggedRows, TooFewRows


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCsv:
    def test_parse(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,b,t\n1,2,3\n4,5,6\n"))
        np.testing.assert_array_equal(ds.X, [[1, 2], [4, 5]])
        np.testing.assert_array_equal(ds.y, [3, 6])
        assert ds.name == "data" and (ds.n, ds.d) == (2, 2)

    def test_nan_cell(self, tmp_path):
        with pytest.raises(ParseError, match=r"line 3, column 'b'"):
            load_csv(write(tmp_path, "a,b,t\n1,2,3\n4,NaN,6\n"))

    def test_garbage_cell(self, tmp_path):
        with pytest.raises(ParseError, match="'x'"):
            load_csv(write(tmp_path, "a,t\n1,2\nx,3\n"))

    def test_single_column(self, tmp_path):
        with pytest.raises(EmptyFile):
            load_csv(write(tmp_path, "t\n1\n2\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyFile):
            load_csv(write(tmp_path, ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(EmptyFile):
            load_csv(write(tmp_path, "a,t\n"))

    def test_ragged(self, tmp_path):
        with pytest.raises(RaggedRows):
            load_csv(write(tmp_path, "a,b,t\n1,2,3\n4,5\n"))

    def test_one_row(self, tmp_path):
        with pytest.raises(TooFewRows):
            load_csv(write(tmp_path, "a,t\n1,2\n"))

    def test_registry(self, tmp_path):
        write(tmp_path, "a,t\n1,2\n3,4\n", "toy.csv")
        manifest = tmp_path / "registry.json"
        manifest.write_text(json.dumps({"toy": "toy.csv"}))
        reg = load_registry(manifest)
        assert load_csv(reg["toy"]).n == 2


class TestDataset:
    def test_validation(self):
        with pytest.raises(DimensionMismatch):
            Dataset("x", np.zeros((3, 2)), np.zeros(4))
        with pytest.raises(TooFewRows):
            Dataset("x", np.zeros((1, 2)), np.zeros(1))
        with pytest.raises(ParseError):
            Dataset("x", np.array([[np.inf], [0.0]]), np.zeros(2))

    def test_subset(self):
        ds = Dataset("x", np.arange(8.0).reshape(4, 2), np.arange(4.0))
        sub = ds.subset([3, 1])
        np.testing.assert_array_equal(sub.y, [3, 1])


class TestEcdf:
    def test_small_column(self):
        emap = ecdf_fit(np.array([[3.0], [1.0], [2.0]]))
        np.testing.assert_allclose(ecdf_transform(emap, [[3.0], [1.0], [2.0]])[:, 0],
                                   [5 / 6, 1 / 6, 0.5])

    def test_clamping_below_and_above(self):
        emap = ecdf_fit(np.array([[3.0], [1.0], [2.0]]))
        np.testing.assert_allclose(ecdf_transform(emap, [[-10.0], [99.0]])[:, 0],
                                   [0.5 / 3, 1 - 0.5 / 3])

    def test_all_equal(self):
        emap = ecdf_fit(np.full((7, 1), 4.2))
        np.testing.assert_allclose(ecdf_transform(emap, np.full((7, 1), 4.2)), 0.5)

    def test_ties_average(self):
        emap = ecdf_fit(np.array([[1.0], [2.0], [2.0], [3.0]]))
        # the tied pair occupies positions 2 and 3
        assert ecdf_transform(emap, [[2.0]])[0, 0] == pytest.approx((2.5 - 0.5) / 4)

    def test_interpolates_unseen(self):
        emap = ecdf_fit(np.array([[0.0], [1.0]]))
        assert ecdf_transform(emap, [[0.5]])[0, 0] == pytest.approx(0.5)

    @pytest.mark.parametrize("n", [100, 1000])
    def test_training_marginals_uniform(self, n):
        rng = np.random.default_rng(n)
        X = np.column_stack([rng.standard_normal(n), rng.exponential(size=n),
                             rng.integers(0, 1000, n).astype(float)])
        U = ecdf_transform(ecdf_fit(X), X)
        for j in range(X.shape[1]):
            assert stats.kstest(U[:, j], "uniform").statistic <= 1.63 / np.sqrt(n)

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(0)
        train = rng.standard_normal((200, 2))
        emap = ecdf_fit(train)
        probes = np.sort(rng.uniform(-5, 5, (10_000, 2)), axis=0)
        out = ecdf_transform(emap, probes)
        assert np.all(np.diff(out, axis=0) >= 0)
        assert out.min() >= 0.5 / 200 and out.max() <= 1 - 0.5 / 200

    def test_column_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ecdf_transform(ecdf_fit(np.zeros((3, 2))), np.zeros((3, 3)))


class TestPartition:
    def test_five_splits(self):
        plan = partition(100, k=5, train_fraction=0.9, seed=0)
        assert len(plan) == 5
        for train, test in plan:
            assert (len(train), len(test)) == (90, 10)
            assert set(train) | set(test) == set(range(100))
            assert not set(train) & set(test)

    def test_deterministic(self):
        a, b = partition(50, 3, 0.8, seed=7), partition(50, 3, 0.8, seed=7)
        for (tr_a, te_a), (tr_b, te_b) in zip(a, b):
            assert np.array_equal(tr_a, tr_b) and np.array_equal(te_a, te_b)
        first, second = list(a)[:2]
        assert not np.array_equal(first[1], second[1])

    def test_empty_test_set(self):
        with pytest.raises(TooFewRows):
            partition(10, train_fraction=0.99)

    @pytest.mark.parametrize("k, f", [(0, 0.9), (1, 0.0), (1, 1.0)])
    def test_invalid_arguments(self, k, f):
        with pytest.raises(ValueError):
            partition(20, k, f)


class TestRmse:
    def test_identical(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_offset(self):
        assert rmse(np.arange(5.0) + 1, np.arange(5.0)) == 1.0

    def test_hand_value(self):
        assert rmse([1.0, 2.0], [3.0, 2.0]) == pytest.approx(np.sqrt(2))

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            rmse([1.0], [1.0, 2.0])


def test_step_data():
    train, test = step_data(seed=0)
    assert (train.n, test.n) == (100, 500)
    assert test.X.min() == -5 and test.X.max() == 5
    np.testing.assert_array_equal(test.y, (test.X[:, 0] > 0).astype(float))
    assert np.abs(train.y - (train.X[:, 0] > 0)).max() < 0.05


def test_additive_data():
    ds, f = additive_data(n=1000, d=10, seed=0)
    assert (ds.n, ds.d) == (1000, 10)
    assert np.std(ds.y - f) == pytest.approx(0.1, rel=0.1)
    again, _ = additive_data(n=1000, d=10, seed=0)
    assert np.array_equal(ds.y, again.y)
