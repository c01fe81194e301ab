"""Data pipeline tests: ingestion, packs, windows, splits, stats, synth."""

import numpy as np
import numpy.testing as npt
import pytest

from stone.data import (
    FIELD_PACK_MAGIC,
    FieldSequence,
    NormStats,
    QueryGrid,
    SensorSeries,
    SynthSpec,
    chrono_split,
    fit_norm_stats,
    load_field_pack,
    load_sensor_csv,
    make_windows,
    normalize_pairs,
    save_field_pack,
    save_sensor_csv,
    synth_generate,
)
from stone.errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    IngestionError,
)


def _write(tmp_path, text, name="sensors.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _series(t_total, n_sensors, seed=0):
    rng = np.random.default_rng(seed)
    start = np.datetime64("2001-01-01", "D")
    return SensorSeries(
        timestamps=start + np.arange(t_total),
        station_ids=[f"s{i}" for i in range(n_sensors)],
        values=rng.normal(size=(t_total, n_sensors)),
    )


def _fields(t_total, n_points, seed=1):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([
        rng.uniform(-80, 80, n_points),
        rng.uniform(-170, 170, n_points),
    ])
    return FieldSequence(coords, rng.normal(size=(t_total, n_points)))


class TestSensorCsv:
    def test_well_formed(self, tmp_path):
        path = _write(tmp_path, "date,a,b\n"
                                "2001-01-01,1.0,2.0\n"
                                "2001-01-02,3.0,4.0\n")
        series = load_sensor_csv(path)
        assert series.station_ids == ["a", "b"]
        npt.assert_array_equal(series.values, [[1.0, 2.0], [3.0, 4.0]])
        assert series.n_days == 2

    def test_missing_cell_interpolated(self, tmp_path):
        # one missing cell bracketed by 10 and 12 becomes 11
        path = _write(tmp_path, "date,a\n"
                                "2001-01-01,10\n"
                                "2001-01-02,\n"
                                "2001-01-03,12\n")
        series = load_sensor_csv(path)
        npt.assert_array_equal(series.values[:, 0], [10.0, 11.0, 12.0])

    def test_missing_rows_interpolated(self, tmp_path):
        path = _write(tmp_path, "date,a\n"
                                "2001-01-01,0\n"
                                "2001-01-04,9\n")
        series = load_sensor_csv(path)
        assert series.n_days == 4
        npt.assert_allclose(series.values[:, 0], [0.0, 3.0, 6.0, 9.0])

    def test_long_gap_rejected_with_dates(self, tmp_path):
        path = _write(tmp_path, "date,a\n"
                                "2001-01-01,1\n"
                                "2001-01-07,2\n")
        with pytest.raises(IngestionError) as err:
            load_sensor_csv(path)
        assert "2001-01-01" in str(err.value) and "2001-01-07" in str(err.value)

    def test_long_cell_run_rejected(self, tmp_path):
        rows = ["date,a", "2001-01-01,1"]
        for day in range(2, 6):
            rows.append(f"2001-01-0{day},")
        rows.append("2001-01-06,2")
        with pytest.raises(IngestionError, match="4 days"):
            load_sensor_csv(_write(tmp_path, "\n".join(rows) + "\n"))

    def test_non_monotone_dates_rejected(self, tmp_path):
        path = _write(tmp_path, "date,a\n"
                                "2001-01-02,1\n"
                                "2001-01-01,2\n")
        with pytest.raises(IngestionError, match="row 3"):
            load_sensor_csv(path)

    def test_non_numeric_cell_rejected(self, tmp_path):
        path = _write(tmp_path, "date,a\n2001-01-01,abc\n")
        with pytest.raises(IngestionError, match="row 2"):
            load_sensor_csv(path)

    def test_edge_missing_rejected(self, tmp_path):
        path = _write(tmp_path, "date,a\n"
                                "2001-01-01,\n"
                                "2001-01-02,5\n")
        with pytest.raises(IngestionError, match="edge"):
            load_sensor_csv(path)

    def test_bad_header_rejected(self, tmp_path):
        path = _write(tmp_path, "time,a\n2001-01-01,1\n")
        with pytest.raises(IngestionError, match="header"):
            load_sensor_csv(path)

    def test_save_load_round_trip(self, tmp_path):
        series = _series(5, 3)
        path = tmp_path / "out.csv"
        save_sensor_csv(path, series)
        loaded = load_sensor_csv(path)
        npt.assert_array_equal(loaded.values, series.values)
        assert loaded.station_ids == series.station_ids
        assert np.array_equal(loaded.timestamps, series.timestamps)


class TestFieldPack:
    def test_write_read_write_bytes_identical(self, tmp_path):
        fields = _fields(6, 4)
        a, b = tmp_path / "a.stnf", tmp_path / "b.stnf"
        save_field_pack(a, fields)
        save_field_pack(b, load_field_pack(a))
        assert a.read_bytes() == b.read_bytes()

    def test_handcrafted_tiny_pack(self, tmp_path):
        # P=2, T=1, coords (10,20), (30,40), frame [1.5, 2.5]
        blob = (FIELD_PACK_MAGIC
                + np.array([1, 2, 1], dtype="<u4").tobytes()
                + np.array([10.0, 20.0, 30.0, 40.0], dtype="<f8").tobytes()
                + np.array([1.5, 2.5], dtype="<f4").tobytes())
        path = tmp_path / "tiny.stnf"
        path.write_bytes(blob)
        fields = load_field_pack(path)
        npt.assert_array_equal(fields.coords_deg, [[10.0, 20.0], [30.0, 40.0]])
        npt.assert_array_equal(fields.values, [[1.5, 2.5]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.stnf"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError, match="magic"):
            load_field_pack(path)

    def test_truncation_names_offset(self, tmp_path):
        fields = _fields(3, 2)
        path = tmp_path / "ok.stnf"
        save_field_pack(path, fields)
        cut = tmp_path / "cut.stnf"
        cut.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError, match="byte 16"):
            load_field_pack(cut)

    def test_version_rejected(self, tmp_path):
        fields = _fields(2, 2)
        path = tmp_path / "v.stnf"
        save_field_pack(path, fields)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (7).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version 7"):
            load_field_pack(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        fields = _fields(2, 2)
        path = tmp_path / "t.stnf"
        save_field_pack(path, fields)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(FormatError, match="trailing"):
            load_field_pack(path)


class TestQueryGrid:
    def test_from_dims_counts_and_ranges(self):
        grid = QueryGrid.from_dims(8, 16)
        assert grid.n_points == 128
        assert np.all(grid.coords_deg[:, 0] > -90)
        assert np.all(grid.coords_deg[:, 0] < 90)
        assert np.all(grid.coords_deg[:, 1] >= -180)
        assert np.all(grid.coords_deg[:, 1] < 180)

    def test_normalized_in_unit_square(self):
        norm = QueryGrid.from_dims(4, 8).normalized()
        assert np.all(norm >= 0.0) and np.all(norm <= 1.0)

    def test_duplicate_points_rejected(self):
        with pytest.raises(DataError):
            QueryGrid(np.array([[0.0, 0.0], [0.0, 0.0]]))


class TestMakeWindows:
    def test_count_example(self):
        pairs = make_windows(_series(10, 2), _fields(10, 3), 3, 2)
        assert len(pairs) == 6  # 10 - 3 - 2 + 1

    def test_single_window(self):
        pairs = make_windows(_series(360, 2), _fields(360, 3), 180, 180)
        assert len(pairs) == 1
        assert pairs[0].anchor == 180

    def test_count_property_sweep(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            t = int(rng.integers(4, 40))
            k_hist = int(rng.integers(1, t - 1))
            k_fut = int(rng.integers(1, t - k_hist + 1))
            pairs = make_windows(_series(t, 1), _fields(t, 2), k_hist, k_fut)
            assert len(pairs) == t - k_hist - k_fut + 1
            anchors = [p.anchor for p in pairs]
            assert anchors == list(range(k_hist, t - k_fut + 1))

    def test_window_contents(self):
        sensors = _series(8, 2, seed=5)
        fields = _fields(8, 3, seed=6)
        pairs = make_windows(sensors, fields, 3, 2)
        pair = pairs[1]  # start=1, anchor=4
        npt.assert_array_equal(pair.history, sensors.values[1:4])
        npt.assert_array_equal(pair.target[:, 0, :], fields.values[4:6].T)
        assert pair.target.shape == (3, 1, 2)

    def test_too_short_series_rejected(self):
        with pytest.raises(ConfigError, match="exceeds"):
            make_windows(_series(4, 1), _fields(4, 2), 3, 2)

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(DimensionError):
            make_windows(_series(10, 1), _fields(9, 2), 3, 2)


class TestChronoSplit:
    def test_sizes_before_guard(self):
        pairs = make_windows(_series(104, 1), _fields(104, 2), 3, 2)
        assert len(pairs) == 100
        splits = chrono_split(pairs)
        # 45/10/45 by count; the guard then trims the train tail
        assert len(splits.val) == 10
        assert len(splits.test) == 45
        assert len(splits.train) + splits.dropped_train == 45

    def test_anchor_ordering(self):
        pairs = make_windows(_series(60, 1), _fields(60, 2), 4, 3)
        splits = chrono_split(pairs)
        assert max(p.anchor for p in splits.train) < min(p.anchor for p in splits.val)
        assert max(p.anchor for p in splits.val) < min(p.anchor for p in splits.test)

    def test_twenty_step_toy_guard(self):
        # T=20, k=2/2: 17 windows -> 7/1/9; the last train window's
        # target crosses the first validation anchor and is dropped
        pairs = make_windows(_series(20, 1), _fields(20, 2), 2, 2)
        assert len(pairs) == 17
        splits = chrono_split(pairs)
        assert splits.dropped_train == 1
        assert [p.anchor for p in splits.train] == [2, 3, 4, 5, 6, 7]
        assert [p.anchor for p in splits.val] == [9]
        assert [p.anchor for p in splits.test] == list(range(10, 19))

    def test_no_training_target_in_forecast_territory(self):
        pairs = make_windows(_series(200, 1), _fields(200, 2), 10, 7)
        splits = chrono_split(pairs)
        boundary = splits.val[0].anchor
        for pair in splits.train:
            start, end = pair.target_days()
            assert end <= boundary

    def test_empty_split_rejected(self):
        pairs = make_windows(_series(9, 1), _fields(9, 2), 2, 2)  # 6 windows
        with pytest.raises(ConfigError, match="empty"):
            chrono_split(pairs)  # floor(0.1 * 6) = 0 validation windows

    def test_guard_exhaustion_rejected(self):
        # train anchors all lie within k_fut of the boundary
        pairs = make_windows(_series(24, 1), _fields(24, 2), 2, 12)
        with pytest.raises(ConfigError):
            chrono_split(pairs)

    def test_fraction_validation(self):
        pairs = make_windows(_series(30, 1), _fields(30, 2), 2, 2)
        with pytest.raises(ConfigError):
            chrono_split(pairs, fractions=(0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            chrono_split(pairs, fractions=(0.9, -0.1, 0.2))


class TestNormStats:
    def test_population_std(self):
        # histories cover values {1,2,3}: mean 2, population std sqrt(2/3)
        start = np.datetime64("2001-01-01", "D")
        sensors = SensorSeries(start + np.arange(4), ["a"],
                               np.array([[1.0], [2.0], [3.0], [99.0]]))
        fields = FieldSequence(np.array([[0.0, 0.0]]),
                               np.array([[1.0], [2.0], [3.0], [99.0]]))
        pairs = make_windows(sensors, fields, 1, 1)  # histories: rows 0,1,2
        stats = fit_norm_stats(pairs)
        npt.assert_allclose(stats.sensor_mean, [2.0], rtol=1e-15)
        npt.assert_allclose(stats.sensor_std, [np.sqrt(2.0 / 3.0)], rtol=1e-15)

    def test_apply_invert_identity(self):
        stats = NormStats(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 5.0, 6.0)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 2))
        npt.assert_allclose(stats.invert_sensors(stats.apply_sensors(x)), x,
                            atol=1e-12)
        y = rng.normal(size=(2, 1, 3))
        npt.assert_allclose(stats.invert_target(stats.apply_target(y)), y,
                            atol=1e-12)

    def test_zero_variance_channel_named(self):
        sensors = _series(10, 2, seed=8)
        sensors.values[:, 1] = 4.25
        pairs = make_windows(sensors, _fields(10, 2, seed=9), 3, 2)
        with pytest.raises(DataError, match="channel 1"):
            fit_norm_stats(pairs)

    def test_train_only_dependence(self):
        sensors = _series(60, 2, seed=10)
        fields = _fields(60, 3, seed=11)
        pairs = make_windows(sensors, fields, 4, 3)
        splits = chrono_split(pairs)
        stats1 = fit_norm_stats(splits.train)
        for pair in splits.val + splits.test:  # corrupt later splits
            pair.history[:] = 999.0
            pair.target[:] = -999.0
        stats2 = fit_norm_stats(splits.train)
        assert stats1.to_dict() == stats2.to_dict()

    def test_normalize_pairs_zscores_train(self):
        sensors = _series(50, 2, seed=12)
        fields = _fields(50, 3, seed=13)
        pairs = make_windows(sensors, fields, 4, 2)
        stats = fit_norm_stats(pairs)
        normed = normalize_pairs(pairs, stats)
        hist = np.concatenate([p.history for p in normed], axis=0)
        npt.assert_allclose(hist.mean(axis=0), [0.0, 0.0], atol=1e-12)
        npt.assert_allclose(hist.std(axis=0), [1.0, 1.0], atol=1e-12)
        targ = np.concatenate([p.target.reshape(-1) for p in normed])
        npt.assert_allclose([targ.mean(), targ.std()], [0.0, 1.0], atol=1e-12)

    def test_round_trip_dict(self):
        stats = NormStats(np.array([1.0]), np.array([2.0]), 3.0, 4.0)
        again = NormStats.from_dict(stats.to_dict())
        assert again.to_dict() == stats.to_dict()


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(seed=3, n_sensors=3, grid=(4, 6), t_total=50)
        s1, f1, d1 = synth_generate(spec)
        s2, f2, d2 = synth_generate(spec)
        assert s1.values.tobytes() == s2.values.tobytes()
        assert f1.values.tobytes() == f2.values.tobytes()
        assert d1.tobytes() == d2.tobytes()

    def test_seed_changes_data(self):
        base = SynthSpec(seed=3, n_sensors=2, grid=(2, 3), t_total=30)
        other = SynthSpec(seed=4, n_sensors=2, grid=(2, 3), t_total=30)
        assert (synth_generate(base)[0].values.tobytes()
                != synth_generate(other)[0].values.tobytes())

    @pytest.mark.parametrize("seed", [0, 7, 123])
    def test_sensors_track_driver(self, seed):
        spec = SynthSpec(seed=seed, n_sensors=4, grid=(2, 2), t_total=400)
        sensors, _, driver = synth_generate(spec)
        for n in range(4):
            corr = np.corrcoef(sensors.values[:, n], driver)[0, 1]
            assert corr > 0.9, f"sensor {n} correlation {corr}"

    def test_field_positive_and_driver_deterministic(self):
        spec = SynthSpec(seed=9, n_sensors=2, grid=(8, 16), t_total=100)
        _, fields, driver = synth_generate(spec)
        assert np.all(fields.values > 0)
        # same driver in, same field out: the field is a function of it
        grid = QueryGrid.from_dims(8, 16)
        norm = grid.normalized()
        bowl = 1.0 + 3.0 * (2.0 * norm[:, 0] - 1.0) ** 2
        ripple = 1.0 + 0.05 * np.sin(2.0 * np.pi * norm[:, 1])
        level = spec.base_level - spec.modulation * driver
        npt.assert_allclose(fields.values, level[:, None] * (bowl * ripple)[None, :],
                            rtol=1e-12)

    def test_latitude_bowl_rises_toward_poles(self):
        spec = SynthSpec(seed=5, n_sensors=2, grid=(8, 16), t_total=40)
        _, fields, _ = synth_generate(spec)
        grid = QueryGrid.from_dims(8, 16)
        lats = grid.coords_deg[:, 0]
        lons = grid.coords_deg[:, 1]
        lon0 = lons[0]
        polar = np.where((np.abs(lats) > 70) & (lons == lon0))[0]
        equatorial = np.where((np.abs(lats) < 15) & (lons == lon0))[0]
        assert polar.size and equatorial.size
        for t in range(fields.n_days):
            assert (fields.values[t, polar].min()
                    > fields.values[t, equatorial].max())

    def test_sensor_series_validates(self):
        spec = SynthSpec(seed=1, n_sensors=2, grid=(2, 2), t_total=20)
        sensors, fields, _ = synth_generate(spec)
        sensors.validate()
        fields.validate()

    def test_bad_spec_rejected(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthSpec(seed=0, n_sensors=0, grid=(2, 2),
                                     t_total=20))
        with pytest.raises(ConfigError):
            synth_generate(SynthSpec(seed=0, n_sensors=1, grid=(2, 2),
                                     t_total=1))
