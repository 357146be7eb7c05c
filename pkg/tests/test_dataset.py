import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causalwatch.dataset import (DatasetError, PreprocessConfig, PreprocessReport,
                                 SpectralProfile, TimeSeriesDataset, apply_report,
                                 choose_max_lag, choose_sampling, dominant_frequencies,
                                 drop_near_constant, load_csv, preprocess, standardize,
                                 subsample, unstandardize)


def _write(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _brute_force_peak(x, dt=1.0):
    """Largest non-DC bin of a Hann-windowed DFT, summed bin by bin."""
    T = len(x)
    k = np.arange(T)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * k / T)
    v = (x - x.mean()) * w
    best, best_f = -1.0, 0
    for f in range(1, T // 2 + 1):
        re = float(np.dot(v, np.cos(2 * np.pi * f * k / T)))
        im = float(np.dot(v, np.sin(2 * np.pi * f * k / T)))
        if re * re + im * im > best:
            best, best_f = re * re + im * im, f
    return best_f / (T * dt)


class TestLoadCsv:
    def test_plain(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = rng.normal(size=(100, 3))
        ds = load_csv(_write(tmp_path / "a.csv", ["a", "b", "c"], rows))
        assert (ds.T, ds.N, ds.dt) == (100, 3, 1.0)
        assert ds.names == ["a", "b", "c"]
        np.testing.assert_array_equal(ds.values, rows)

    def test_duplicate_header(self, tmp_path):
        path = _write(tmp_path / "d.csv", ["P-101", "P-101"], [[1, 2], [3, 4]])
        with pytest.raises(DatasetError, match="duplicate"):
            load_csv(path)

    def test_non_numeric_reports_position(self, tmp_path):
        path = _write(tmp_path / "n.csv", ["a", "b"], [[1, 2], [3, "x"], [5, 6]])
        with pytest.raises(DatasetError, match=r"row 3, column 'b'"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="no such file"):
            load_csv(tmp_path / "nope.csv")

    def test_too_few_rows(self, tmp_path):
        with pytest.raises(DatasetError, match="fewer than 2"):
            load_csv(_write(tmp_path / "s.csv", ["a"], [[1]]))

    def test_timestamp_sets_dt(self, tmp_path):
        rows = [[10 * k, k, 2 * k] for k in range(5)]
        ds = load_csv(_write(tmp_path / "t.csv", ["ts", "a", "b"], rows),
                      timestamp_column="ts")
        assert ds.dt == 10.0
        assert ds.names == ["a", "b"]

    def test_iso_timestamps(self, tmp_path):
        rows = [[f"2015-12-22T16:30:0{k}", k] for k in range(4)]
        ds = load_csv(_write(tmp_path / "iso.csv", ["Timestamp", "x"], rows),
                      timestamp_column="Timestamp")
        assert ds.dt == 1.0

    def test_gaps(self, tmp_path):
        path = _write(tmp_path / "g.csv", ["a", "b"], [[1, 2], [3, ""], [5, 6]])
        with pytest.raises(DatasetError, match="missing value at row 3"):
            load_csv(path)
        ds = load_csv(path, fill="ffill")
        assert ds.values[1, 1] == 2.0


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        TimeSeriesDataset(np.zeros((1, 2)), ["a", "b"])
    with pytest.raises(DatasetError):
        TimeSeriesDataset(np.zeros((3, 2)), ["a", "a"])
    with pytest.raises(DatasetError):
        TimeSeriesDataset(np.zeros((3, 1)), ["a"], dt=0)
    with pytest.raises(DatasetError):
        TimeSeriesDataset(np.array([[1.0], [np.nan]]), ["a"])


class TestDominantFrequencies:
    def test_sinusoid(self):
        t = np.arange(1000)
        ds = TimeSeriesDataset(np.sin(2 * np.pi * 0.1 * t), ["s"])
        prof = dominant_frequencies(ds)
        assert abs(prof.dominant_freq[0] - 0.1) <= 1 / 1000

    def test_constant_column(self):
        ds = TimeSeriesDataset(np.column_stack([np.full(64, 3.0), np.arange(64.0) % 4]),
                               ["c", "saw"])
        prof = dominant_frequencies(ds)
        assert prof.dominant_freq[0] == 0 and prof.power[0] == 0
        assert prof.dominant_freq[1] == pytest.approx(0.25)

    def test_toy_against_brute_force(self, toy):
        prof = dominant_frequencies(toy)
        for j in range(toy.N):
            assert prof.dominant_freq[j] == pytest.approx(_brute_force_peak(toy.values[:, j]))
        # frozen from the brute-force oracle
        np.testing.assert_allclose(prof.dominant_freq, [0.0185, 0.0185, 0.0185])

    def test_within_nyquist(self, rng):
        ds = TimeSeriesDataset(rng.normal(size=(256, 4)), list("abcd"), dt=0.5)
        prof = dominant_frequencies(ds)
        assert np.all(prof.dominant_freq > 0)
        assert np.all(prof.dominant_freq <= 1 / (2 * 0.5))

    def test_too_short(self):
        with pytest.raises(DatasetError):
            dominant_frequencies(TimeSeriesDataset(np.arange(7.0), ["a"]))


def _profile(freqs, dt=1.0):
    freqs = np.asarray(freqs, float)
    return SpectralProfile([f"v{k}" for k in range(freqs.size)], freqs,
                           np.ones_like(freqs), dt)


class TestSamplingAndLag:
    def test_sampling_formula(self):
        assert choose_sampling(_profile([0.05, 0.01]), PreprocessConfig()) == 2

    def test_sampling_clamp(self):
        assert choose_sampling(_profile([0.5]), PreprocessConfig()) == 1

    def test_sampling_all_constant(self):
        with pytest.raises(DatasetError):
            choose_sampling(_profile([0.0, 0.0]), PreprocessConfig())

    def test_swat_scale(self):
        # a 1 s recording whose fastest component has a ~30 min period
        t_s = choose_sampling(_profile([1 / 1800.0]), PreprocessConfig())
        assert t_s == 180

    def test_max_lag(self):
        assert choose_max_lag(_profile([0.05, 0.05]), 2, PreprocessConfig()) == 10

    def test_max_lag_cap(self):
        # 1 / (1 * 0.027) = 37.04
        assert choose_max_lag(_profile([0.027]), 1, PreprocessConfig(tau_cap=20)) == 20

    def test_toy_lag_formula(self, toy):
        prof = dominant_frequencies(toy)
        cfg = PreprocessConfig()
        t_s = choose_sampling(prof, cfg)
        assert t_s == round(1 / (10 * 0.0185)) == 5
        expected = min(20, max(1, math.floor(1 / (t_s * np.mean(prof.dominant_freq)) + 0.5)))
        assert choose_max_lag(prof, t_s, cfg) == expected == 11

    def test_deterministic(self):
        prof = _profile([0.013, 0.2, 0.07])
        cfg = PreprocessConfig()
        assert choose_sampling(prof, cfg) == choose_sampling(prof, cfg)
        assert choose_max_lag(prof, 3, cfg) == choose_max_lag(prof, 3, cfg)


class TestSubsample:
    def test_identity(self, rng):
        ds = TimeSeriesDataset(rng.normal(size=(10, 2)), ["a", "b"])
        out = subsample(ds, 1)
        np.testing.assert_array_equal(out.values, ds.values)
        assert out.dt == ds.dt

    def test_step_three(self):
        ds = TimeSeriesDataset(np.arange(10.0), ["a"], dt=2.0)
        out = subsample(ds, 3)
        np.testing.assert_array_equal(out.values[:, 0], [0, 3, 6, 9])
        assert out.T == math.ceil(10 / 3) and out.dt == 6.0

    def test_toy_matches_slice(self, toy):
        out = subsample(toy, 2)
        np.testing.assert_array_equal(out.values, toy.values[0::2])

    def test_mean_pooling(self):
        ds = TimeSeriesDataset(np.arange(7.0), ["a"])
        np.testing.assert_array_equal(subsample(ds, 3, "mean").values[:, 0], [1, 4])

    @given(st.integers(10, 60), st.integers(1, 4), st.integers(1, 4))
    def test_composition(self, T, a, b):
        assume(math.ceil(T / (a * b)) >= 2)
        ds = TimeSeriesDataset(np.arange(float(T)), ["a"])
        np.testing.assert_array_equal(subsample(subsample(ds, a), b).values,
                                      subsample(ds, a * b).values)


class TestNearConstant:
    def test_flat_column_dropped(self, rng):
        ds = TimeSeriesDataset(np.column_stack([np.full(50, 5.0), rng.normal(size=50)]),
                               ["flat", "noise"])
        out, dropped = drop_near_constant(ds, PreprocessConfig())
        assert dropped == ["flat"] and out.names == ["noise"]

    def test_bumper_channels(self, rng):
        # rarely-triggered contact sensors sit at a fixed level with tiny jitter
        T = 500
        kin = np.cumsum(rng.normal(size=(T, 2)), axis=0)
        bumper = 1.0 + 1e-4 * rng.normal(size=(T, 2))
        touch = np.zeros((T, 1))
        ds = TimeSeriesDataset(np.column_stack([kin, bumper, touch]),
                               ["joint_a", "joint_b", "bumper_l", "bumper_r", "head_touch"])
        out, dropped = drop_near_constant(ds, PreprocessConfig())
        assert out.names == ["joint_a", "joint_b"]
        assert dropped == ["bumper_l", "bumper_r", "head_touch"]

    def test_all_dropped(self):
        ds = TimeSeriesDataset(np.ones((5, 2)), ["a", "b"])
        with pytest.raises(DatasetError):
            drop_near_constant(ds, PreprocessConfig())

    def test_literal_condition(self, rng):
        # the literal form removes zero-mean signals; the default keeps them
        ds = TimeSeriesDataset(np.column_stack([rng.normal(size=100) - 3,
                                                rng.normal(size=100) + 50]), ["a", "b"])
        _, dropped = drop_near_constant(ds, PreprocessConfig(literal_constant_test=True))
        assert dropped == ["a"]
        _, dropped = drop_near_constant(ds, PreprocessConfig())
        assert dropped == []

    @given(arrays(float, (30, 3), elements=st.floats(-1e3, 1e3)),
           st.floats(1e-3, 0.5))
    @settings(max_examples=50)
    def test_property(self, values, ratio):
        ds = TimeSeriesDataset(values, ["a", "b", "c"])
        cfg = PreprocessConfig(constant_ratio=ratio)
        try:
            out, dropped = drop_near_constant(ds, cfg)
        except DatasetError:
            return
        for j, name in enumerate(ds.names):
            std, mean = values[:, j].std(), values[:, j].mean()
            if std == 0:
                assert name in dropped
            elif std >= ratio * abs(mean):
                assert name in out.names


class TestStandardize:
    def test_hand_values(self):
        ds = TimeSeriesDataset(np.array([1.0, 2.0, 3.0]), ["a"])
        out, scaling = standardize(ds)
        np.testing.assert_allclose(out.values[:, 0], [-1.224744871391589, 0, 1.224744871391589])
        assert scaling["a"][0] == 2.0
        assert scaling["a"][1] == pytest.approx(0.816496580927726)

    def test_idempotent(self, rng):
        out, _ = standardize(TimeSeriesDataset(rng.normal(size=(40, 2)), ["a", "b"]))
        again, _ = standardize(out)
        np.testing.assert_allclose(again.values, out.values, atol=1e-12)

    def test_toy_moments(self, toy):
        out, _ = standardize(toy)
        assert np.all(np.abs(out.values.mean(axis=0)) < 1e-12)
        np.testing.assert_allclose(out.values.std(axis=0), 1.0, atol=1e-12)

    def test_zero_variance(self):
        with pytest.raises(DatasetError):
            standardize(TimeSeriesDataset(np.ones((4, 1)), ["a"]))

    @given(arrays(float, (20, 2), elements=st.floats(-1e4, 1e4)))
    def test_round_trip(self, values):
        ds = TimeSeriesDataset(values, ["a", "b"])
        if np.any(values.std(axis=0) < 1e-3):
            return
        out, scaling = standardize(ds)
        np.testing.assert_allclose(unstandardize(out, scaling).values, values, atol=1e-9)


class TestPreprocess:
    def test_report_json_shape(self, toy):
        _, report = preprocess(toy)
        data = json.loads(json.dumps(report.to_dict()))
        assert set(data) >= {"kept", "dropped_constant", "t_s", "tau_max", "scaling"}
        assert set(data["kept"]) | set(data["dropped_constant"]) == set(toy.names)
        assert PreprocessReport.from_dict(data) == report

    def test_overrides_and_replay(self, toy):
        out, report = preprocess(toy, PreprocessConfig(t_s=2, tau_max=4))
        assert (report.t_s, report.tau_max) == (2, 4)
        np.testing.assert_array_equal(apply_report(toy, report).values, out.values)
