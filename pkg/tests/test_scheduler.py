import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tfdpm.dataset import ConfigurationError, window_arrays
from tfdpm.diffusion import linear_schedule
from tfdpm.scheduler import (
    DEFAULT_GRID,
    ScheduleError,
    SchedulerNet,
    beta_bound,
    c_term,
    fast_sample,
    matched_alpha,
    next_beta,
    scheduler_loss,
    stride_beta,
    train_scheduler,
    tune_init,
)

from helpers import replay_bounds, sine_windows, tiny_model, tiny_scheduler


class TestNextBeta:
    def test_arithmetic(self):
        assert beta_bound(0.2, 0.5) == pytest.approx(0.2)
        assert next_beta(0.5, 0.2, 0.5) == pytest.approx(0.1)

    def test_bound_from_alpha_bar(self):
        # 1 - 0.7/0.8 = 0.125 < 0.2
        assert beta_bound(0.2, 0.7) == pytest.approx(0.125)

    def test_small_sigma(self):
        assert 0 < next_beta(1e-9, 0.2, 0.5) < 1e-9

    def test_open_interval(self):
        sigma = torch.sigmoid(torch.tensor(30.0, dtype=torch.float64))
        b = next_beta(sigma, torch.tensor(0.2, dtype=torch.float64), 0.5)
        assert b < 0.2

    def test_inadmissible(self):
        with pytest.raises(ScheduleError):
            next_beta(0.5, 0.3, 0.7)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-4, 0.9), st.floats(1e-3, 0.99))
    def test_strictly_inside(self, sigma, b, ab):
        if ab >= 1 - b:
            return
        out = next_beta(sigma, b, ab)
        assert 0 < out < beta_bound(b, ab)


class TestLoss:
    def test_c_golden(self):
        assert c_term(0.25, 0.5, 2) == pytest.approx(0.25 * math.log(2) - 0.5, abs=1e-12)
        assert c_term(0.25, 0.5, 2) == pytest.approx(-0.32671, abs=1e-5)

    def test_c_boundary(self):
        assert c_term(0.4, 0.6, 3) == pytest.approx(0.0, abs=1e-15)

    def test_domain(self):
        eps = np.ones((1, 2))
        assert np.isfinite(scheduler_loss(eps, eps, np.array([0.2]), np.array([0.5]))).all()
        with pytest.raises(ScheduleError):
            scheduler_loss(eps, eps, np.array([0.5]), np.array([0.5]))

    def test_numpy_matches_torch(self, rng):
        eps, eh = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        b, ab = rng.uniform(0.01, 0.2, 4), rng.uniform(0.1, 0.7, 4)
        a = scheduler_loss(eps, eh, b, ab)
        t = scheduler_loss(*(torch.as_tensor(v) for v in (eps, eh, b, ab)))
        np.testing.assert_allclose(a, t.numpy(), rtol=1e-12)

    def test_expanded_form(self):
        eps, eh = np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])
        b, ab = 0.1, 0.6
        s = 1 - ab
        resid = math.sqrt(s) * eps - b / math.sqrt(s) * eh
        want = (resid**2).sum() / (2 * (s - b)) + 0.25 * math.log(s / b) + (b / s - 1)
        assert float(scheduler_loss(eps, eh, np.array([b]), np.array([ab]))[0]) == pytest.approx(want)


class TestStride:
    def test_tau_one(self):
        s = linear_schedule()
        n = np.arange(0, 100)
        np.testing.assert_allclose(stride_beta(s, n, 1), s.beta[n + 1], rtol=0, atol=1e-12)

    def test_tau_composes(self):
        s = linear_schedule()
        got = 1 - stride_beta(s, 20, 10)
        assert got == pytest.approx(np.prod(1 - s.beta[21:31]))


class TestMatchedAlpha:
    def test_on_grid(self):
        s = linear_schedule()
        np.testing.assert_allclose(matched_alpha(s, s.alpha_bar[[1, 40, 100]]), s.alpha[[1, 40, 100]])

    def test_clamped(self):
        s = linear_schedule()
        assert matched_alpha(s, 0.01) == pytest.approx(s.alpha[100])


class TestTraining:
    def _setup(self):
        m = tiny_model()
        w = window_arrays(sine_windows(), 6)
        return m, w

    def test_freeze_contract(self):
        m, w = self._setup()
        before = {k: v.clone() for k, v in m.state_dict().items()}
        net = tiny_scheduler(m)
        train_scheduler(m, net, w, epochs=2, seed=0)
        after = m.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert all(p.requires_grad for p in m.parameters())

    def test_reproducible(self):
        m, w = self._setup()
        outs = []
        for _ in range(2):
            net = tiny_scheduler(m, seed=4)
            r = train_scheduler(m, net, w, epochs=2, seed=1)
            outs.append((r.train_losses, [v.clone() for v in net.state_dict().values()]))
        assert outs[0][0] == outs[1][0]
        assert all(torch.equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))

    def test_epoch_cap(self):
        m, w = self._setup()
        r = train_scheduler(m, tiny_scheduler(m), w, epochs=3, patience=10)
        assert len(r.train_losses) == 3

    def test_tau_range(self):
        m, w = self._setup()
        with pytest.raises(ConfigurationError):
            train_scheduler(m, tiny_scheduler(m, tau=99), w, epochs=1)


class ConstSigma(SchedulerNet):
    def __init__(self, base, c):
        super().__init__(base.n_channels, base.extractor.hidden_size)
        self.c = c

    def forward(self, xn, cond):
        return torch.full((xn.shape[0],), self.c, dtype=xn.dtype)


class TestFastSample:
    def test_immediate_floor_stop(self):
        m = tiny_model()
        net = ConstSigma(m, 1e-6)
        cond = torch.zeros(4, 8)
        x, tr = fast_sample(m, net, cond, torch.Generator().manual_seed(0), alpha_bar_init=0.5, beta_init=0.3)
        assert x.shape == (4, 3)
        for i in range(4):
            row = tr.row(i)
            assert list(row["betas_used"]) == [0.3]
            assert row["stop_reason"] == "hit_floor"
            assert row["rejected"] == pytest.approx(1e-6 * min(1 - 0.5 / 0.7, 0.3))
            # one construction call plus one final-pass call
            assert row["n_calls"] == 2

    def test_stack_contract(self):
        m = tiny_model()
        net = tiny_scheduler(m)
        cond = torch.randn(16, 8)
        _, tr = fast_sample(m, net, cond, torch.Generator().manual_seed(1), alpha_bar_init=0.4, beta_init=0.5)
        floor = m.schedule.beta[1]
        for i in range(16):
            b = tr.betas_used[i]
            assert np.all(np.diff(b) < 0)
            assert np.all(b >= floor)
            assert tr.rejected[i] is None or tr.rejected[i] < floor
            np.testing.assert_allclose(tr.bounds[i], replay_bounds(b, 0.4), rtol=1e-12)
            assert tr.n_calls[i] == 2 * len(b) - (tr.stop_reason[i] == "exhausted")

    def test_seeded(self):
        m = tiny_model()
        net = tiny_scheduler(m)
        cond = torch.randn(3, 8)
        a, _ = fast_sample(m, net, cond, torch.Generator().manual_seed(2))
        b, _ = fast_sample(m, net, cond, torch.Generator().manual_seed(2))
        assert torch.equal(a, b)

    def test_inadmissible_start(self):
        m = tiny_model()
        with pytest.raises(ScheduleError):
            fast_sample(m, tiny_scheduler(m), torch.zeros(1, 8), alpha_bar_init=0.8, beta_init=0.3)

    def test_fallback_below_floor(self):
        m = tiny_model(N=10)
        x, tr = fast_sample(m, tiny_scheduler(m), torch.zeros(2, 8), torch.Generator().manual_seed(0),
                            alpha_bar_init=0.5, beta_init=1e-6)
        assert tr.fallback and list(tr.n_calls) == [10, 10]


def test_grid_shape():
    assert len(DEFAULT_GRID) == 9 and DEFAULT_GRID[0] == 0.1 and DEFAULT_GRID[-1] == 0.9


def test_tune_init_small_grid():
    from tfdpm.dataset import build_dataset, ChannelSpec

    m = tiny_model(N=20)
    net = tiny_scheduler(m, tau=3)
    vals = sine_windows(T=60)
    labels = np.zeros(60, dtype=np.int64)
    labels[30:35] = 1
    vals[30:35] += 0.5
    ds = build_dataset(vals, [ChannelSpec(f"c{i}") for i in range(3)], labels=labels)
    res = tune_init(m, net, ds, 6, grid=(0.2, 0.5, 0.8), seed=0)
    assert len(res.table) == 9
    skipped = [r for r in res.table if r.get("skipped")]
    assert {(r["alpha_bar"], r["beta"]) for r in skipped} == {(0.5, 0.5), (0.5, 0.8), (0.8, 0.2), (0.8, 0.5), (0.8, 0.8), (0.2, 0.8)}
    assert (res.alpha_bar, res.beta) in {(0.2, 0.2), (0.2, 0.5), (0.5, 0.2)}
    assert (net.init_alpha_bar, net.init_beta) == (res.alpha_bar, res.beta)
    best_f1 = max(r["f1"] for r in res.table if r["f1"] is not None)
    tied = [r for r in res.table if r["f1"] == best_f1]
    assert res.mean_calls == min(r["mean_calls"] for r in tied)
