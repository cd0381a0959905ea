import numpy as np
import pytest

from heterocast.data import (
    Normalizer,
    add_gaussian_noise,
    apply_normalizer,
    chronological_split,
    fit_normalizer,
    interpolate_missing,
    invert_normalizer,
    load_prepared,
    load_series,
    make_windows,
    save_prepared,
    write_series_csv,
)
from heterocast.exceptions import DataError, FormatError, ParseError

from conftest import series_from_values, toy_dataset


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadSeries:
    def test_basic_file(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1.0,2.0\n1,3.0,4.0\n2,5.0,6.0\n")
        series = load_series(path)
        assert series.shape == (3, 2, 1)
        assert series.node_ids == ["s0", "s1"]
        assert not series.has_missing
        np.testing.assert_array_equal(series.values[:, :, 0], [[1, 2], [3, 4], [5, 6]])

    def test_missing_cell_flagged(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1.0,2.0\n1,,4.0\n2,5.0,6.0\n")
        series = load_series(path)
        assert series.missing.sum() == 1
        assert series.missing[1, 0, 0]

    def test_stride_violation(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1,2\n1,3,4\n3,5,6\n")
        with pytest.raises(FormatError):
            load_series(path)

    def test_non_numeric_cell_reports_row(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1,2\n1,oops,4\n")
        with pytest.raises(ParseError, match="row 3"):
            load_series(path)

    def test_wrong_arity_reports_row(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1,2\n1,3\n")
        with pytest.raises(ParseError, match="row 3"):
            load_series(path)

    def test_multi_feature_stack(self, tmp_path):
        a = write_csv(tmp_path / "a.csv", "t,s0,s1\n0,1,2\n1,3,4\n")
        b = write_csv(tmp_path / "b.csv", "t,s0,s1\n0,10,20\n1,30,40\n")
        series = load_series([a, b])
        assert series.shape == (2, 2, 2)
        np.testing.assert_array_equal(series.values[0, 0], [1, 10])

    def test_round_trip_via_writer(self, tmp_path, rng):
        series = series_from_values(rng.normal(size=(8, 3)))
        write_series_csv(tmp_path / "w.csv", series)
        again = load_series(tmp_path / "w.csv")
        np.testing.assert_array_equal(again.values, series.values)


class TestInterpolate:
    def test_interior_run(self):
        series = series_from_values(np.array([[1.0, 0], [np.nan, 0], [np.nan, 0], [4.0, 0]]))
        fixed = interpolate_missing(series)
        np.testing.assert_allclose(fixed.values[:, 0, 0], [1, 2, 3, 4])

    def test_no_missing_identity(self, rng):
        series = series_from_values(rng.normal(size=(10, 3)))
        fixed = interpolate_missing(series)
        np.testing.assert_array_equal(fixed.values, series.values)

    def test_edge_extension(self):
        series = series_from_values(np.array([[np.nan, 0], [5.0, 0], [np.nan, 0]]))
        fixed = interpolate_missing(series)
        np.testing.assert_allclose(fixed.values[:, 0, 0], [5, 5, 5])

    def test_fully_missing_column_names_node(self):
        series = series_from_values(np.array([[np.nan, 0], [np.nan, 0]]))
        with pytest.raises(DataError, match="s0"):
            interpolate_missing(series)

    def test_idempotent(self, rng):
        values = rng.normal(size=(30, 4))
        mask = rng.random(values.shape) < 0.3
        values[mask] = np.nan
        values[0] = values[-1] = 1.0  # keep every column observable
        series = series_from_values(values)
        once = interpolate_missing(series)
        twice = interpolate_missing(once)
        np.testing.assert_array_equal(once.values, twice.values)


class TestNormalizer:
    def test_mean_std_of_training_prefix(self):
        # floor(0.6 * 4) = 2 -> prefix {1, 3}; population std of {1, 3} is 1
        series = series_from_values(np.array([[1.0, 1.0], [3.0, 3.0], [10.0, 10.0], [20.0, 20.0]]))
        norm = fit_normalizer(series, train_fraction=0.6)
        np.testing.assert_allclose(norm.mean, [2.0])
        np.testing.assert_allclose(norm.std, [1.0])

    def test_constant_data_floored_with_warning(self):
        series = series_from_values(np.full((10, 2), 7.0))
        with pytest.warns(UserWarning, match="floored"):
            norm = fit_normalizer(series)
        np.testing.assert_allclose(norm.mean, [7.0])
        np.testing.assert_allclose(norm.std, [1e-8])

    def test_apply_formula(self):
        norm = Normalizer(mean=np.array([2.0]), std=np.array([1.0]))
        assert norm.apply(np.array([4.0])) == pytest.approx(2.0)

    def test_round_trip_identity(self, rng):
        norm = Normalizer(mean=rng.normal(size=2), std=rng.uniform(0.5, 3, size=2))
        x = rng.normal(size=(5, 3, 2)) * 10
        back = invert_normalizer(norm.apply(x), norm)
        np.testing.assert_allclose(back, x, rtol=1e-9)

    def test_identity_stats_are_identity(self, rng):
        series = series_from_values(rng.normal(size=(10, 3)))
        norm = Normalizer(mean=np.array([0.0]), std=np.array([1.0]))
        out = apply_normalizer(series, norm)
        np.testing.assert_array_equal(out.values, series.values)

    def test_short_prefix_rejected(self):
        series = series_from_values(np.ones((2, 2)))
        with pytest.raises(DataError):
            fit_normalizer(series, train_fraction=0.6)


class TestWindows:
    def test_sample_count(self, rng):
        series = series_from_values(rng.normal(size=(36, 3)))
        ds = make_windows(series, P=12, Q=12, n_slots=288)
        assert ds.n_samples == 13

    def test_single_window_boundary(self, rng):
        values = rng.normal(size=(24, 3))
        ds = make_windows(series_from_values(values), P=12, Q=12, n_slots=288)
        assert ds.n_samples == 1
        np.testing.assert_array_equal(ds.inputs[0, :, :, 0], values[:12])
        np.testing.assert_array_equal(ds.targets[0, :, :, 0], values[12:])

    def test_slot_of_last_observed_step(self, rng):
        # last observed timestamp of the first window is 289 + 11 = 300
        series = series_from_values(rng.normal(size=(30, 3)), t0=289)
        ds = make_windows(series, P=12, Q=12, n_slots=288)
        assert ds.slot_index[0] == 12

    def test_window_reconstruction(self, rng):
        values = rng.normal(size=(40, 3))
        series = series_from_values(values)
        ds = make_windows(series, P=5, Q=3, n_slots=10)
        for s in range(ds.n_samples):
            joined = np.concatenate([ds.inputs[s], ds.targets[s]], axis=0)
            np.testing.assert_array_equal(joined[:, :, 0], values[s : s + 8])

    def test_too_short(self, rng):
        series = series_from_values(rng.normal(size=(10, 3)))
        with pytest.raises(DataError):
            make_windows(series, P=8, Q=8, n_slots=4)


class TestSplit:
    def make(self, S, rng):
        series = series_from_values(rng.normal(size=(S + 3, 3)))
        return make_windows(series, P=2, Q=2, n_slots=5)

    def test_exact_ratio(self, rng):
        ds = chronological_split(self.make(10, rng))
        assert [len(ds.indices(s)) for s in ("train", "val", "test")] == [6, 2, 2]

    def test_remainder_to_test(self, rng):
        ds = chronological_split(self.make(11, rng))
        assert [len(ds.indices(s)) for s in ("train", "val", "test")] == [6, 2, 3]

    def test_too_small(self, rng):
        with pytest.raises(DataError):
            chronological_split(self.make(4, rng))

    def test_boundaries_ordered(self, rng):
        ds = chronological_split(self.make(20, rng))
        t = ds.start_timestamps
        assert t[ds.indices("train")].max() < t[ds.indices("val")].min()
        assert t[ds.indices("val")].max() < t[ds.indices("test")].min()


class TestNoise:
    def test_zero_variance_identity(self):
        ds = toy_dataset()
        noisy = add_gaussian_noise(ds, 0.0, seed=3)
        np.testing.assert_array_equal(noisy.inputs, ds.inputs)
        np.testing.assert_array_equal(noisy.targets, ds.targets)

    def test_empirical_variance(self):
        ds = toy_dataset(T=500, N=20)
        noisy = add_gaussian_noise(ds, 2.0, seed=7)
        train = ds.indices("train")
        delta = np.concatenate([
            (noisy.inputs[train] - ds.inputs[train]).ravel(),
            (noisy.targets[train] - ds.targets[train]).ravel(),
        ])
        assert delta.size >= 10**5
        assert 1.9 <= delta.var() <= 2.1

    def test_val_test_untouched(self):
        ds = toy_dataset()
        noisy = add_gaussian_noise(ds, 4.0, seed=5)
        for split in ("val", "test"):
            idx = ds.indices(split)
            np.testing.assert_array_equal(noisy.inputs[idx], ds.inputs[idx])
            np.testing.assert_array_equal(noisy.targets[idx], ds.targets[idx])

    def test_deterministic(self):
        ds = toy_dataset()
        a = add_gaussian_noise(ds, 2.0, seed=11)
        b = add_gaussian_noise(ds, 2.0, seed=11)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            add_gaussian_noise(toy_dataset(), -1.0, seed=0)

    def test_target_noise_flag(self):
        ds = toy_dataset()
        noisy = add_gaussian_noise(ds, 2.0, seed=5, noise_targets=False)
        np.testing.assert_array_equal(noisy.targets, ds.targets)
        train = ds.indices("train")
        assert not np.array_equal(noisy.inputs[train], ds.inputs[train])


def test_refit_on_noisy_train_changes_stats_only(rng):
    values = rng.normal(10, 2, size=(100, 4))
    clean = series_from_values(values)
    noisy_values = values.copy()
    noisy_values[:60] += rng.normal(0, 2, size=(60, 4))  # perturb the train prefix
    noisy = series_from_values(noisy_values)
    a, b = fit_normalizer(clean), fit_normalizer(noisy)
    assert not np.allclose(a.mean, b.mean) or not np.allclose(a.std, b.std)
    np.testing.assert_array_equal(noisy.values[60:], clean.values[60:])


def test_prepared_round_trip(tmp_path):
    ds = toy_dataset()
    norm = Normalizer(mean=np.array([1.0]), std=np.array([2.0]))
    save_prepared(tmp_path / "prep", ds, norm, node_ids=[f"s{i}" for i in range(6)])
    loaded, norm2, manifest = load_prepared(tmp_path / "prep")
    np.testing.assert_array_equal(loaded.inputs, ds.inputs)
    np.testing.assert_array_equal(loaded.targets, ds.targets)
    np.testing.assert_array_equal(loaded.split_tag, ds.split_tag)
    np.testing.assert_array_equal(norm2.mean, norm.mean)
    assert manifest["node_ids"] == [f"s{i}" for i in range(6)]
    assert manifest["n_samples"] == ds.n_samples
