import numpy as np
import pytest

from tabtoken.data import (
    MISSING_CATEGORY,
    DatasetTable,
    FeatureKind,
    TaskKind,
    add_gaussian_noise,
    load_csv,
    load_schema_sidecar,
    preprocess,
    write_csv,
    write_schema_sidecar,
)
from tabtoken.errors import DataError, InvalidArgument

from conftest import cat, num


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


# --- load_csv ----------------------------------------------------------------

def test_load_csv_detects_feature_kinds(tmp_path):
    path = write(tmp_path, "a,b,color,label\n1.5,2,red,0\n,3,blue,1\n2.5,4,,0\n")
    table = load_csv(path)
    assert [f.kind for f in table.schema] == [FeatureKind.NUMERICAL, FeatureKind.NUMERICAL, FeatureKind.CATEGORICAL]
    assert table.schema[2].categories == ["red", "blue", MISSING_CATEGORY]
    np.testing.assert_array_equal(table.values[:, 2], [0.0, 1.0, 2.0])
    assert np.isnan(table.values[1, 0])
    assert table.task is TaskKind.BINARY
    assert table.class_labels == ["0", "1"]


def test_categorical_hint_overrides_numeric_detection(tmp_path):
    path = write(tmp_path, "a,b,label\n0.1,1,0\n0.2,2,1\n0.3,,0\n")
    table = load_csv(path, schema_hint={"b": "cat"})
    assert table.schema[1].kind is FeatureKind.CATEGORICAL
    assert table.schema[1].categories == ["1", "2", MISSING_CATEGORY]
    assert table.schema[1].cardinality == 3


def test_numerical_hint_on_text_column_is_rejected(tmp_path):
    path = write(tmp_path, "a,label\nx,0\ny,1\n")
    with pytest.raises(DataError):
        load_csv(path, schema_hint={"a": "num"})


def test_regression_task_is_detected_from_real_labels(tmp_path):
    path = write(tmp_path, "a,label\n1,0.5\n2,1.25\n3,-3.0\n")
    table = load_csv(path)
    assert table.task is TaskKind.REGRESSION
    np.testing.assert_array_equal(table.labels, [0.5, 1.25, -3.0])


@pytest.mark.parametrize("text", [
    "",
    "a,b,label\n",
    "a,b,c,label\n1,2,3,0\n4,5,6,7,1\n",
])
def test_malformed_files_raise_data_error(tmp_path, text):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, text))


def test_missing_label_column_raises(tmp_path):
    with pytest.raises(DataError, match="target"):
        load_csv(write(tmp_path, "a,label\n1,0\n"), label_column="target")


def test_missing_file_raises_with_path(tmp_path):
    missing = tmp_path / "nope.csv"
    with pytest.raises(DataError, match="nope.csv"):
        load_csv(missing)


def test_write_csv_and_sidecar_reproduce_the_table(tmp_path):
    path = write(tmp_path, "a,color,label\n0.1,red,yes\n,blue,no\n0.30000000000000004,red,yes\n")
    table = load_csv(path)
    out = tmp_path / "copy.csv"
    sidecar = tmp_path / "schema.json"
    write_csv(table, out)
    write_schema_sidecar(table.schema, sidecar)
    again = load_csv(out, schema_hint=load_schema_sidecar(sidecar))
    assert again.feature_names == table.feature_names
    assert again.schema[1].categories == table.schema[1].categories
    np.testing.assert_array_equal(again.values, table.values)
    assert again.class_labels == table.class_labels


def test_table_rejects_out_of_range_category_index():
    with pytest.raises(DataError):
        DatasetTable([cat("c", ["x", "y"])], np.array([[0.0], [2.0]]), np.array([0, 1]),
                     TaskKind.BINARY, ["0", "1"])


# --- preprocessing -----------------------------------------------------------

def test_preprocess_fills_missing_with_train_mean():
    table = DatasetTable([num("a")], np.array([[1.0], [np.nan], [3.0]]), np.array([0, 1, 0]),
                         TaskKind.BINARY, ["0", "1"])
    train, _, stats = preprocess(table)
    np.testing.assert_allclose(train.values[:, 0], [-1.224745, 0.0, 1.224745], atol=1e-6)
    assert stats.means == [2.0]


def test_constant_column_becomes_zero_and_is_flagged():
    table = DatasetTable([num("a"), num("b")], np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]),
                         np.array([0, 1, 0]), TaskKind.BINARY, ["0", "1"])
    train, _, stats = preprocess(table)
    np.testing.assert_array_equal(train.values[:, 0], [0.0, 0.0, 0.0])
    assert stats.degenerate == ["a"]
    assert stats.stds[0] == 1.0
    unseen = DatasetTable(table.schema, np.array([[7.0, 2.0]]), np.array([1]), TaskKind.BINARY, ["0", "1"])
    np.testing.assert_array_equal(stats.apply(unseen).values[:, 0], [2.0])


def test_test_statistics_never_leak_into_train():
    schema = [num("a")]
    train = DatasetTable(schema, np.array([[0.0], [2.0]]), np.array([0, 1]), TaskKind.BINARY, ["0", "1"])
    test = DatasetTable(schema, np.array([[np.nan], [100.0]]), np.array([0, 1]), TaskKind.BINARY, ["0", "1"])
    _, (test_out,), stats = preprocess(train, [test])
    assert test_out.values[0, 0] == 0.0
    assert test_out.values[1, 0] == pytest.approx(99.0)
    assert stats.means == [1.0]


def test_preprocess_is_idempotent(make_table):
    once, _, _ = preprocess(make_table(n_rows=40, seed=4))
    twice, _, _ = preprocess(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-12)


def test_categorical_cells_pass_through(make_table):
    table = make_table(n_rows=30, n_num=1, n_cat=2, seed=2)
    out, _, _ = preprocess(table)
    np.testing.assert_array_equal(out.values[:, 1:], table.values[:, 1:])


def test_regression_targets_are_standardised_and_restored(make_table):
    table = make_table(n_rows=50, task=TaskKind.REGRESSION, seed=8)
    out, _, stats = preprocess(table)
    assert out.labels.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.labels.std() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(stats.destandardize_targets(out.labels), table.labels, atol=1e-12)


def test_all_missing_training_column_raises():
    table = DatasetTable([num("a")], np.array([[np.nan], [np.nan]]), np.array([0, 1]),
                         TaskKind.BINARY, ["0", "1"])
    with pytest.raises(DataError):
        preprocess(table)


def test_preprocess_rejects_mismatched_schemas(make_table):
    with pytest.raises(DataError):
        preprocess(make_table(n_num=2), [make_table(n_num=3)])


# --- noise -------------------------------------------------------------------

def _numeric_table(column):
    return DatasetTable([num("a")], column.reshape(-1, 1), np.arange(column.size) % 2,
                        TaskKind.BINARY, ["0", "1"])


def test_zero_noise_ratio_is_identity():
    table = _numeric_table(np.random.default_rng(0).normal(size=50))
    np.testing.assert_array_equal(add_gaussian_noise(table, 0.0, seed=1).values, table.values)


def test_noise_scale_follows_column_std():
    column = np.random.default_rng(3).normal(scale=2.0, size=100000)
    table = _numeric_table(column)
    noisy = add_gaussian_noise(table, 0.1, seed=4)
    diff = noisy.values[:, 0] - column
    assert diff.std() == pytest.approx(0.1 * column.std(), rel=0.02)
    assert diff.std() == pytest.approx(0.2, rel=0.02)


def test_noise_rejects_categorical_features_unless_skipped(make_table):
    table = make_table(n_num=1, n_cat=1)
    with pytest.raises(InvalidArgument):
        add_gaussian_noise(table, 0.1, seed=0)
    noisy = add_gaussian_noise(table, 0.1, seed=0, skip_categorical=True)
    np.testing.assert_array_equal(noisy.values[:, 1], table.values[:, 1])
    assert not np.array_equal(noisy.values[:, 0], table.values[:, 0])


def test_negative_noise_ratio_is_rejected(make_table):
    with pytest.raises(InvalidArgument):
        add_gaussian_noise(make_table(n_cat=0), -0.5)
