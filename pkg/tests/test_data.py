import numpy as np
import pytest
import scipy.io

from daef import data
from daef.errors import (
    InsufficientAnomalies,
    MissingLabelColumn,
    NonNumericFeature,
    ParseError,
    TooFewSamples,
    TooManyPartitions,
)


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_small_csv(tmp_path):
    path = write(tmp_path, "a,b,class\n1,2,0\n3,4,1\n5,6,0\n")
    ds = data.load_csv(path, "class", "1")
    assert ds.n == 3 and ds.dim == 2
    assert ds.labels.tolist() == [False, True, False]
    np.testing.assert_array_equal(ds.features, [[1, 3, 5], [2, 4, 6]])


def test_label_by_index(tmp_path):
    path = write(tmp_path, "class,a\nb,1\ng,2\n")
    ds = data.load_csv(path, 0, "b")
    assert ds.labels.tolist() == [True, False]


def test_non_numeric_feature(tmp_path):
    path = write(tmp_path, "a,b,class\n1,2,0\n3,x,1\n")
    with pytest.raises(NonNumericFeature) as info:
        data.load_csv(path, "class")
    assert info.value.row == 3 and info.value.col == 1


def test_ragged_row(tmp_path):
    path = write(tmp_path, "a,b,class\n1,2,0\n3,1\n")
    with pytest.raises(ParseError) as info:
        data.load_csv(path, "class")
    assert info.value.row == 3


def test_missing_label_column(tmp_path):
    path = write(tmp_path, "a,b\n1,2\n")
    with pytest.raises(MissingLabelColumn):
        data.load_csv(path, "class")


def test_drop_columns(tmp_path):
    path = write(tmp_path, "Time,a,Class\n0,1,0\n5,2,1\n")
    ds = data.load_csv(path, "Class", drop_columns=("Time",))
    np.testing.assert_array_equal(ds.features, [[1, 2]])


def test_write_then_load(tmp_path, rng):
    ds = data.LabeledDataset(rng.standard_normal((3, 7)), rng.random(7) < 0.3)
    data.write_csv(tmp_path / "x.csv", ds)
    back = data.load_csv(tmp_path / "x.csv", "label")
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_convert_mat(tmp_path, rng):
    x = rng.standard_normal((12, 4))
    y = (rng.random((12, 1)) < 0.3).astype(float)
    scipy.io.savemat(tmp_path / "toy.mat", {"X": x, "y": y})
    ds = data.convert_mat(tmp_path / "toy.mat", tmp_path / "toy.csv")
    back = data.load_csv(tmp_path / "toy.csv", "label")
    np.testing.assert_array_equal(back.features, x.T)
    np.testing.assert_array_equal(back.labels, y.ravel() == 1)
    assert ds.n == 12


def test_bundled_ionosphere_manifest():
    ds = data.load_dataset("ionosphere")
    assert (ds.n, ds.dim, ds.n_anomalies) == (351, 33, 126)


def test_manifest_names_cover_benchmarks():
    assert {"cardio", "ionosphere", "shuttle", "creditcard", "covertype", "pendigits", "optdigits"} <= set(
        data.manifest_names()
    )


def test_cardio_manifest_counts():
    assert data.load_manifest("cardio")["expected"] == {"n": 1831, "dim": 21, "anomalies": 176}


def test_missing_dataset_file():
    with pytest.raises(FileNotFoundError, match="DAEF_DATA_DIR"):
        data.load_dataset({"name": "nowhere", "file": "nowhere.csv"})


def test_data_dir_env(tmp_path, monkeypatch):
    write(tmp_path, "a,label\n1,0\n2,1\n3,0\n", "toy.csv")
    monkeypatch.setenv("DAEF_DATA_DIR", str(tmp_path))
    ds = data.load_dataset({"name": "toy", "file": "toy.csv", "label_column": "label",
                            "expected": {"n": 3}})
    assert ds.n == 3


def test_manifest_count_mismatch_warns(tmp_path):
    path = write(tmp_path, "a,label\n1,0\n2,1\n")
    with pytest.warns(UserWarning, match="counts differ"):
        data.load_dataset({"name": "toy", "label_column": "label", "expected": {"n": 5}}, path)


def test_scaler_defining_property(rng):
    x = rng.standard_normal((4, 50)) * [[1], [5], [0.1], [2]] + 3
    x[2] = 7.0
    z = data.scaler_apply(data.scaler_fit(x), x)
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(z[[0, 1, 3]].var(axis=1), 1, atol=1e-9)
    np.testing.assert_array_equal(z[2], 0)


def test_scaler_elementwise_oracle(rng):
    train = rng.standard_normal((3, 30))
    test = rng.standard_normal((3, 5)) + 4
    s = data.scaler_fit(train)
    z = s.apply(test)
    for i in range(3):
        for j in range(5):
            mu = sum(train[i]) / 30
            sd = (sum((v - mu) ** 2 for v in train[i]) / 30) ** 0.5
            assert z[i, j] == pytest.approx((test[i, j] - mu) / sd, rel=1e-12)
    assert data.StandardScaler.from_dict(s.to_dict()).apply(test).tolist() == z.tolist()


def test_scaler_too_few():
    with pytest.raises(TooFewSamples):
        data.scaler_fit(np.ones((2, 1)))


def test_split_folds_sizes():
    labels = np.zeros(100, bool)
    labels[:10] = True
    a = data.split_folds(labels, 10, 0)
    assert np.bincount(a).tolist() == [10] * 10


def test_split_folds_stratified():
    labels = np.zeros(6870, bool)
    labels[:156] = True
    a = data.split_folds(labels, 10, 3)
    per_fold = np.bincount(a[labels], minlength=10)
    assert set(per_fold.tolist()) <= {15, 16}
    sizes = np.bincount(a)
    assert sizes.max() - sizes.min() <= 1


def test_split_folds_deterministic():
    labels = np.arange(50) % 5 == 0
    assert np.array_equal(data.split_folds(labels, 5, 9), data.split_folds(labels, 5, 9))


def test_split_folds_too_few_anomalies():
    labels = np.zeros(30, bool)
    labels[:3] = True
    with pytest.raises(InsufficientAnomalies):
        data.split_folds(labels, 5, 0)


def test_partitions(rng):
    x = rng.standard_normal((2, 10))
    assert np.array_equal(data.partition_columns(x, 1, 0)[0], x)
    idx = data.partition_indices(10, 4, 0)
    assert sorted(len(i) for i in idx) == [2, 2, 3, 3]
    parts = data.partition_columns(x, 4, 0)
    order = np.concatenate(idx)
    rebuilt = np.empty_like(x)
    rebuilt[:, order] = np.hstack(parts)
    np.testing.assert_array_equal(rebuilt, x)


def test_too_many_partitions():
    with pytest.raises(TooManyPartitions):
        data.partition_indices(3, 4, 0)
