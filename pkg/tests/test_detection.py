import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfdpm.dataset import ChannelSpec, build_dataset
from tfdpm.detection import (
    EvaluationError,
    anomaly_score,
    best_f1_search,
    detect,
    point_adjust,
    prf1,
    segments,
)

from helpers import tiny_model, tiny_scheduler
from oracles import adjust_loop, brute_force_best, f1_loop


class TestScore:
    def test_identity(self):
        assert anomaly_score([1.0, 2.0], [1.0, 2.0]) == 0

    def test_arithmetic(self):
        assert anomaly_score([0, 0], [3, 4]) == pytest.approx(12.5)

    def test_permutation(self, rng):
        a, b = rng.random(6), rng.random(6)
        p = rng.permutation(6)
        assert anomaly_score(a, b) == pytest.approx(anomaly_score(a[p], b[p]))

    def test_mismatch(self):
        with pytest.raises(ValueError):
            anomaly_score([1, 2], [1, 2, 3])


class TestPointAdjust:
    def test_fill(self):
        np.testing.assert_array_equal(point_adjust([0, 0, 1, 0], [0, 1, 1, 0], 0.5), [0, 1, 1, 0])

    def test_no_segments(self):
        np.testing.assert_array_equal(point_adjust([0, 1, 0, 1], [0, 0, 0, 0], 0.5), [0, 1, 0, 1])

    def test_no_alerts(self):
        np.testing.assert_array_equal(point_adjust([0, 0, 0], [1, 1, 0], 0.5), [0, 0, 0])

    def test_segments(self):
        assert segments([1, 1, 0, 1, 0, 0, 1]) == [(0, 2), (3, 4), (6, 7)]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
    def test_properties(self, pairs):
        raw = np.array([a for a, _ in pairs], dtype=np.int64)
        lab = np.array([b for _, b in pairs], dtype=np.int64)
        adj = point_adjust(raw, lab, 0.5)
        np.testing.assert_array_equal(adj, adjust_loop(list(raw), list(lab)))
        # idempotent, superset of raw, no change outside segments
        np.testing.assert_array_equal(point_adjust(adj, lab, 0.5), adj)
        assert np.all(adj >= raw)
        np.testing.assert_array_equal(adj[lab == 0], raw[lab == 0])


class TestPRF:
    def test_two_thirds(self):
        p, r, f = prf1([1, 1, 1, 0, 0], [1, 1, 0, 1, 0])
        assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))

    def test_perfect(self):
        assert prf1([0, 1, 1], [0, 1, 1]) == (1.0, 1.0, 1.0)

    def test_none_predicted(self):
        assert prf1([0, 0, 0], [0, 1, 1]) == (0.0, 0.0, 0.0)


class TestBestF1:
    def test_example(self):
        rep = best_f1_search([1, 9, 9, 1], [0, 1, 1, 0])
        assert rep.f1 == 1.0
        for thr in np.linspace(1.0, 8.99, 7):
            assert prf1(point_adjust([1, 9, 9, 1], [0, 1, 1, 0], thr), [0, 1, 1, 0])[2] == 1.0

    def test_threshold_above_max_not_chosen(self):
        rep = best_f1_search([0.1, 0.8, 0.2], [0, 1, 0])
        assert rep.threshold < 0.8 and rep.recall == 1.0

    def test_no_anomalies(self):
        with pytest.raises(EvaluationError):
            best_f1_search([1.0, 2.0], [0, 0])

    def test_brute_force_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 51))
            scores = np.round(rng.random(n), int(rng.integers(1, 3)))
            labels = (rng.random(n) < 0.3).astype(int)
            if not labels.any():
                labels[rng.integers(n)] = 1
            rep = best_f1_search(scores, labels)
            thr, p, r, f = brute_force_best(list(scores), list(labels))
            assert (rep.threshold, rep.precision, rep.recall, rep.f1) == (thr, p, r, f)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=60))
    def test_maximal(self, pairs):
        scores = np.array([s for s, _ in pairs])
        labels = np.array([int(b) for _, b in pairs])
        if not labels.any():
            labels[0] = 1
        rep = best_f1_search(scores, labels)
        rng = np.random.default_rng(len(pairs))
        for thr in rng.uniform(-0.1, 1.1, 100):
            adj = point_adjust(scores, labels, thr)
            assert rep.f1 >= f1_loop(adj, labels)[2] - 1e-12
        np.testing.assert_array_equal(rep.adjusted_predictions, point_adjust(scores, labels, rep.threshold))

    def test_monotone_in_segment_score(self):
        # raising a score inside a segment never lowers best F1
        rng = np.random.default_rng(3)
        scores = rng.random(30)
        labels = np.zeros(30, dtype=int)
        labels[10:15] = 1
        base = best_f1_search(scores, labels).f1
        scores[12] += 1.0
        assert best_f1_search(scores, labels).f1 >= base


class TestDetect:
    def _data(self):
        rng = np.random.default_rng(0)
        vals = rng.random((40, 3))
        labels = np.zeros(40, dtype=int)
        labels[25:30] = 1
        return build_dataset(vals, [ChannelSpec(f"c{i}") for i in range(3)], labels=labels)

    def test_counts_and_determinism(self):
        m = tiny_model(N=10)
        ds = self._data()
        a = detect(ds, m, 6, seed=3)
        b = detect(ds, m, 6, seed=3)
        assert a.q == 40 - 6
        np.testing.assert_array_equal(a.scores, b.scores)
        np.testing.assert_array_equal(a.time_indices, np.arange(6, 40))
        assert np.all(a.eps_calls == 10)

    def test_fast_mode_calls(self):
        m = tiny_model(N=20)
        net = tiny_scheduler(m, tau=3)
        rep = detect(self._data(), m, 6, "fast", scheduler=net, seed=0)
        assert rep.q == 34 and rep.eps_calls.max() <= 2 * 20

    def test_fast_needs_scheduler(self):
        from tfdpm.dataset import ConfigurationError

        with pytest.raises(ConfigurationError):
            detect(self._data(), tiny_model(N=10), 6, "fast")

    def test_unlabelled(self):
        ds = build_dataset(np.random.rand(20, 3), [ChannelSpec(f"c{i}") for i in range(3)])
        with pytest.raises(EvaluationError):
            detect(ds, tiny_model(N=10), 6)
