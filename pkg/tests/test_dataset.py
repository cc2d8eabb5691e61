import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tfdpm.dataset import (
    ChannelSpec,
    ConfigurationError,
    DataParseError,
    SchemaError,
    SIM_CHANNELS,
    denormalize,
    load_dataset,
    normalize,
    simulate_raw,
    sliding_windows,
    synth_cps,
    window_arrays,
    build_dataset,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestNormalize:
    def test_basic(self):
        out, stats = normalize(np.array([[0.0], [5.0], [10.0]]))
        np.testing.assert_allclose(out[:, 0], [0, 0.5, 1])
        np.testing.assert_array_equal(stats, [[0, 10]])

    def test_already_normalized_is_identity(self):
        x = np.array([[0.0], [1.0]])
        out, _ = normalize(x, np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(out, x)

    def test_train_stats_extrapolate(self):
        out, _ = normalize(np.array([[12.0]]), np.array([[0.0, 10.0]]))
        assert out[0, 0] == pytest.approx(1.2)

    def test_degenerate_channel_maps_to_zero(self):
        out, _ = normalize(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]))
        np.testing.assert_array_equal(out[:, 0], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3)))
    def test_round_trip(self, x):
        out, stats = normalize(x)
        ok = stats[:, 1] > stats[:, 0]
        np.testing.assert_allclose(denormalize(out, stats)[:, ok], x[:, ok], atol=1e-9)
        assert np.all((out >= 0) & (out <= 1))


class TestLoad:
    def test_continuous_normalized(self, tmp_path):
        p = write(tmp_path, "a\n2\n4\n6\n")
        ds = load_dataset(p, [ChannelSpec("a")])
        np.testing.assert_allclose(ds.values[:, 0], [0, 0.5, 1])
        assert ds.labels is None

    def test_constant_column(self, tmp_path):
        p = write(tmp_path, "a,b\n5,1\n5,2\n5,3\n")
        ds = load_dataset(p, [ChannelSpec("a"), ChannelSpec("b")])
        np.testing.assert_array_equal(ds.values[:, 0], 0)

    def test_one_hot(self, tmp_path):
        p = write(tmp_path, "pump\n1\n0\n2\n")
        ds = load_dataset(p, [ChannelSpec("pump", "discrete", 3)])
        np.testing.assert_array_equal(ds.values[0], [0, 1, 0])
        np.testing.assert_array_equal(ds.values.sum(axis=1), 1)
        assert ds.columns == ["pump=0", "pump=1", "pump=2"]

    def test_missing_rows_dropped_and_labels(self, tmp_path):
        p = write(tmp_path, "a,label\n1,0\n,1\nnan,0\n3,1\n")
        ds = load_dataset(p, [ChannelSpec("a")])
        assert ds.T == 2
        np.testing.assert_array_equal(ds.labels, [0, 1])

    def test_unknown_channel(self, tmp_path):
        p = write(tmp_path, "a,zzz\n1,2\n")
        with pytest.raises(SchemaError, match="zzz"):
            load_dataset(p, [ChannelSpec("a")])

    def test_malformed_row_reports_line(self, tmp_path):
        p = write(tmp_path, "a,b\n1,2\n3\n")
        with pytest.raises(DataParseError, match="row 3"):
            load_dataset(p, [ChannelSpec("a"), ChannelSpec("b")])

    def test_unparseable_value(self, tmp_path):
        p = write(tmp_path, "a\n1\nfoo\n")
        with pytest.raises(DataParseError, match="row 3"):
            load_dataset(p, [ChannelSpec("a")])

    def test_train_stats_reused(self, tmp_path):
        train = load_dataset(write(tmp_path, "a\n0\n10\n", "tr.csv"), [ChannelSpec("a")])
        test = load_dataset(write(tmp_path, "a\n12\n", "te.csv"), [ChannelSpec("a")], train.norm_stats)
        assert test.values[0, 0] == pytest.approx(1.2)

    def test_bad_cardinality(self):
        with pytest.raises(SchemaError):
            ChannelSpec("p", "discrete", 1)

    def test_duplicate_names(self):
        with pytest.raises(SchemaError):
            build_dataset(np.zeros((2, 2)), [ChannelSpec("a"), ChannelSpec("a")])


class TestWindows:
    def test_counts(self):
        w = window_arrays(np.zeros((100, 2)), 12)
        assert len(w) == 88

    def test_minimal(self):
        v = np.arange(13.0)[:, None]
        w = window_arrays(v, 12)
        assert len(w) == 1 and w.time_indices[0] == 12
        np.testing.assert_array_equal(w.histories[0, :, 0], np.arange(12))

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            window_arrays(np.zeros((12, 1)), 12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 10), st.integers(1, 9))
    def test_coverage(self, T, omega, batch):
        if T <= omega:
            return
        vals = np.random.default_rng(T).random((T, 2))
        ds = build_dataset(vals, [ChannelSpec("a"), ChannelSpec("b")])
        batches = list(sliding_windows(ds, omega, batch))
        targets = np.concatenate([b.targets for b in batches])
        np.testing.assert_array_equal(targets, ds.values[omega:])
        for b in batches:
            for h, t in zip(b.histories, b.time_indices):
                np.testing.assert_array_equal(h, ds.values[t - omega : t])


class TestSimulator:
    def test_deterministic(self):
        a = simulate_raw("easy", 500, 400, seed=1)
        b = simulate_raw("easy", 500, 400, seed=1)
        for x, y in zip(a[:3], b[:3]):
            np.testing.assert_array_equal(x, y)

    def test_shape_and_labels(self):
        train, test = synth_cps("easy", 5000, 2000, seed=1)
        assert train.D == test.D == 9 + 2 * 2
        assert not train.labels.any()
        ratio = test.labels.mean()
        assert 0.05 <= ratio <= 0.12
        assert len(train.channels) == len(SIM_CHANNELS)
        np.testing.assert_array_equal(test.norm_stats, train.norm_stats)
        assert train.values.min() >= 0 and train.values.max() <= 1

    @pytest.mark.parametrize("scenario", ["easy", "hard"])
    @pytest.mark.parametrize("seed", [0, 3, 7])
    def test_attack_plan(self, scenario, seed):
        _, _, labels, attacks = simulate_raw(scenario, 300, 2000, seed)
        assert len(attacks) >= 5
        assert 0.05 <= labels.mean() <= 0.12
        assert {a.kind for a in attacks} <= {"bias", "stuck", "ramp", "flip"}
        seg_starts = np.flatnonzero(np.diff(np.concatenate([[0], labels])) == 1)
        assert len(seg_starts) == len(attacks)

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            synth_cps("easy", 150, 500)
