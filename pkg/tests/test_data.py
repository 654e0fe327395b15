import numpy as np
import pytest

from bayesagg.data import (Dataset, SyntheticSpec, SyntheticTask, TaskSpec, denormalize, generate_synthetic,
                           load_csv, make_splits, normalize_targets, write_csv)
from bayesagg.errors import LabelOutOfRange, ParseError, ZeroVariance

MIXED = SyntheticSpec(n=300, d_x=5, seed=4, tasks=(
    SyntheticTask("r", "regression", 2, noise=0.3),
    SyntheticTask("b", "binary", angle=90.0),
    SyntheticTask("m", "multiclass", 3, angle=45.0),
))


def test_noiseless_linear_fit_is_exact():
    ds = generate_synthetic(SyntheticSpec(n=100, d_x=6, tasks=(SyntheticTask("t", noise=0.0),)))
    y = ds.labels["t"][:, 0]
    w, *_ = np.linalg.lstsq(ds.x, y, rcond=None)
    assert np.mean((ds.x @ w - y) ** 2) < 1e-20


def test_opposite_teachers_at_180_degrees():
    spec = SyntheticSpec(n=50, d_x=4, tasks=(SyntheticTask("a", noise=0.0), SyntheticTask("b", noise=0.0, angle=180.0)))
    ds = generate_synthetic(spec)
    np.testing.assert_allclose(ds.labels["a"], -ds.labels["b"], atol=1e-12)


def test_same_seed_same_data():
    a, b = generate_synthetic(MIXED), generate_synthetic(MIXED)
    np.testing.assert_array_equal(a.x, b.x)
    for name in a.labels:
        np.testing.assert_array_equal(a.labels[name], b.labels[name])
    for split in a.splits:
        np.testing.assert_array_equal(a.splits[split], b.splits[split])


def test_label_types():
    ds = generate_synthetic(MIXED)
    assert ds.labels["r"].shape == (300, 2)
    assert set(np.unique(ds.labels["b"])) <= {0.0, 1.0}
    assert ds.labels["m"].dtype.kind == "i" and ds.labels["m"].max() <= 2


def test_angle_validated():
    with pytest.raises(ValueError):
        SyntheticSpec(tasks=(SyntheticTask("a", angle=200.0),))


@pytest.mark.parametrize("n", [10, 97, 300, 1001])
def test_splits_disjoint_cover_and_sized(n):
    spec = SyntheticSpec(n=n, d_x=3, tasks=(SyntheticTask("a"),))
    ds = generate_synthetic(spec)
    idx = np.concatenate([ds.splits[s] for s in ("train", "val", "test")])
    np.testing.assert_array_equal(np.sort(idx), np.arange(n))
    for s, frac in zip(("train", "val", "test"), spec.splits):
        assert abs(len(ds.splits[s]) - frac * n) <= 1


def test_splits_stratified_by_class():
    ds = generate_synthetic(MIXED.__class__(n=1000, d_x=5, seed=1, tasks=(SyntheticTask("m", "multiclass", 3),)))
    overall = np.bincount(ds.labels["m"], minlength=3) / ds.n
    for s in ("train", "val", "test"):
        share = np.bincount(ds.labels["m"][ds.splits[s]], minlength=3) / len(ds.splits[s])
        np.testing.assert_allclose(share, overall, atol=0.02)


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(MIXED)
    path = tmp_path / "data.csv"
    write_csv(ds, path)
    back = load_csv(path, ds.tasks, seed=MIXED.seed)
    np.testing.assert_array_equal(back.x, ds.x)
    for name in ds.labels:
        np.testing.assert_array_equal(back.labels[name], ds.labels[name])


def test_csv_malformed_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1,y\n1,2,3\n4,oops,6\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_csv(path, [TaskSpec("y", "regression")])
    assert err.value.row == 3 and err.value.column == "x1"


def test_csv_ragged_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1,y\n1,2,3\n4,5\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_csv(path, [TaskSpec("y", "regression")])
    assert err.value.row == 3


def test_csv_label_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,y\n1,0\n2,3\n", encoding="utf-8")
    with pytest.raises(LabelOutOfRange):
        load_csv(path, [TaskSpec("y", "multiclass", 3)])


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ParseError):
        load_csv(path, [TaskSpec("y", "regression")])


def tiny(values, train):
    values = np.asarray(values, dtype=float)
    ds = Dataset(np.zeros((len(values), 1)), {"y": values}, [TaskSpec("y", "regression")])
    rest = np.setdiff1d(np.arange(len(values)), train)
    ds.splits = {"train": np.asarray(train), "val": rest, "test": np.array([], dtype=int)}
    return ds


def test_normalize_hand_example():
    ds, stats = normalize_targets(tiny([0.0, 2.0, 10.0], [0, 1]))
    mean, std = stats["y"]
    assert mean[0] == 1.0 and std[0] == 1.0
    np.testing.assert_allclose(ds.labels["y"][:, 0], [-1.0, 1.0, 9.0])
    np.testing.assert_allclose(denormalize(ds, "y", ds.labels["y"])[:, 0], [0.0, 2.0, 10.0])


def test_normalize_ignores_held_out_rows():
    a, _ = normalize_targets(tiny([0.0, 2.0, 5.0], [0, 1]))
    b, _ = normalize_targets(tiny([0.0, 2.0, 500.0], [0, 1]))
    np.testing.assert_array_equal(a.labels["y"][:2], b.labels["y"][:2])


def test_normalize_standardized_column_unchanged(rng):
    v = rng.standard_normal(50)
    v = (v - v.mean()) / v.std()
    ds, _ = normalize_targets(tiny(v, np.arange(50)))
    np.testing.assert_allclose(ds.labels["y"][:, 0], v, atol=1e-12)


def test_normalize_constant_column():
    with pytest.raises(ZeroVariance):
        normalize_targets(tiny([3.0, 3.0, 3.0], [0, 1, 2]))


def test_make_splits_deterministic():
    ds = generate_synthetic(MIXED)
    a, b = make_splits(ds, seed=9), make_splits(ds, seed=9)
    for s in a:
        np.testing.assert_array_equal(a[s], b[s])
