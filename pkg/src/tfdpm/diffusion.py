"""Conditional denoising diffusion: schedule tables, corruption, the
SNR-weighted noise-prediction loss, the conditional noise network and the
ancestral sampler.

Step indices are 1-based throughout. Schedule tables are padded with a
step-0 entry (``alpha_bar[0] == 1``) so ``table[n]`` is the value at step n.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .dataset import ConfigurationError, WindowBatch
from .extractors import Extractor

log = logging.getLogger(__name__)

EpsFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# schedule
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule and the tables derived from it (float64)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_beta: np.ndarray
    snr: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta) - 1

    @property
    def betas(self) -> np.ndarray:
        """beta_1 .. beta_N without the step-0 pad."""
        return self.beta[1:]

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ConfigurationError("need at least one noise scale")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigurationError("noise scales must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        posterior_beta = np.zeros_like(beta)
        posterior_beta[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * betas
        snr = np.empty_like(beta)
        snr[1:] = alpha_bar[1:] / (1.0 - alpha_bar[1:])
        # SNR(0) is infinite; extrapolate linearly from steps 1 and 2
        snr[0] = 2 * snr[1] - snr[2] if len(betas) >= 2 else 2 * snr[1]
        return cls(beta, alpha, alpha_bar, posterior_beta, snr)

    def check_step(self, n) -> None:
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.n_steps):
            raise IndexError(f"diffusion step must lie in 1..{self.n_steps}")

    def loss_weight(self, n) -> np.ndarray:
        return self.n_steps / 2 * (self.snr[np.asarray(n) - 1] - self.snr[n])


def linear_schedule(n_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 1e-2) -> NoiseSchedule:
    if n_steps < 2:
        raise ConfigurationError("need at least two diffusion steps")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError("require 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, n_steps))


def snr(schedule: NoiseSchedule, n) -> np.ndarray | float:
    """alpha_bar_n / (1 - alpha_bar_n); step 0 returns the capped value."""
    n = np.asarray(n)
    if np.any(n < 0) or np.any(n > schedule.n_steps):
        raise IndexError(f"step must lie in 0..{schedule.n_steps}")
    return schedule.snr[n]


def _table(schedule_table: np.ndarray, n, like: torch.Tensor) -> torch.Tensor:
    idx = torch.as_tensor(n, dtype=torch.long)
    return torch.as_tensor(schedule_table, dtype=like.dtype, device=like.device)[idx]


def forward_sample(schedule: NoiseSchedule, x0, n, eps):
    """Corrupt ``x0`` to step ``n``: sqrt(abar) x0 + sqrt(1 - abar) eps.

    Works on numpy arrays or tensors; ``n`` may be a scalar or one step per row.
    """
    schedule.check_step(n)
    if isinstance(x0, torch.Tensor):
        ab = _table(schedule.alpha_bar, n, x0)
        if ab.ndim == 1 and x0.ndim > 1:
            ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    ab = schedule.alpha_bar[np.asarray(n)]
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(ab) == 1 and x0.ndim > 1:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * np.asarray(eps)


def forward_step(schedule: NoiseSchedule, x_prev, n, eps):
    """One transition q(x_n | x_{n-1})."""
    b = schedule.beta[n]
    return np.sqrt(1 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(eps)


def posterior_params(schedule: NoiseSchedule, x0, xn, n):
    """Mean and variance of q(x_{n-1} | x_n, x_0)."""
    schedule.check_step(n)
    ab, ab_prev = schedule.alpha_bar[n], schedule.alpha_bar[n - 1]
    c0 = math.sqrt(ab_prev) * schedule.beta[n] / (1 - ab)
    cn = math.sqrt(schedule.alpha[n]) * (1 - ab_prev) / (1 - ab)
    return c0 * np.asarray(x0) + cn * np.asarray(xn), schedule.posterior_beta[n]


# --------------------------------------------------------------------------- #
# noise network
# --------------------------------------------------------------------------- #


class FourierEmbedding(nn.Module):
    """sin/cos features of a scalar in [0, 1] at geometrically spaced frequencies."""

    def __init__(self, n_freqs: int = 64, out_features: int = 64, max_freq: float = 100.0):
        super().__init__()
        self.register_buffer("freqs", math.pi * torch.logspace(0, math.log10(max_freq), n_freqs))
        self.proj = nn.Sequential(
            nn.Linear(2 * n_freqs, out_features), nn.SiLU(), nn.Linear(out_features, out_features)
        )

    def forward(self, level: torch.Tensor) -> torch.Tensor:
        ang = level[:, None] * self.freqs.to(level.dtype)
        return self.proj(torch.cat([ang.sin(), ang.cos()], dim=-1))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, skip_channels: int, dilation: int):
        super().__init__()
        self.dilated = nn.Conv1d(channels, 2 * channels, 3, padding=dilation, dilation=dilation)
        self.cond = nn.Conv1d(1, 2 * channels, 1)
        self.out = nn.Conv1d(channels, channels + skip_channels, 1)
        self.channels = channels
        self.skip_channels = skip_channels

    def forward(self, x, cond):
        y = self.dilated(x) + self.cond(cond)
        gate, filt = y.chunk(2, dim=1)
        y = torch.sigmoid(gate) * torch.tanh(filt)
        res, skip = self.out(y).split([self.channels, self.skip_channels], dim=1)
        return (x + res) / math.sqrt(2.0), skip


class EpsNetwork(nn.Module):
    """WaveNet-style conditional noise predictor.

    The D target values are treated as a length-D signal with one input
    channel. ``alpha`` (per row) is mapped linearly so the schedule's largest
    alpha lands on 1 and its smallest on 0, Fourier-embedded and added to the
    smoothed input before four gated residual blocks with dilations 1, 2, 4, 8.
    """

    def __init__(
        self,
        n_channels: int,
        cond_size: int,
        alpha_range: tuple[float, float],
        residual_channels: int = 64,
        skip_channels: int = 64,
        dilations=(1, 2, 4, 8),
        n_freqs: int = 64,
    ):
        super().__init__()
        self.n_channels = n_channels
        self.cond_size = cond_size
        lo, hi = alpha_range
        self.register_buffer("alpha_lo", torch.tensor(float(lo), dtype=torch.float64))
        self.register_buffer("alpha_hi", torch.tensor(float(hi), dtype=torch.float64))
        self.input_conv = nn.Conv1d(1, residual_channels, 5, padding=2)
        self.embedding = FourierEmbedding(n_freqs, residual_channels)
        self.cond_proj = nn.Linear(cond_size, n_channels)
        self.blocks = nn.ModuleList(ResidualBlock(residual_channels, skip_channels, d) for d in dilations)
        self.skip_proj = nn.Conv1d(skip_channels, skip_channels, 1)
        self.output = nn.Conv1d(skip_channels, 1, 1)

    def rescale_alpha(self, alpha: torch.Tensor) -> torch.Tensor:
        span = self.alpha_hi - self.alpha_lo
        if span == 0:
            return torch.ones_like(alpha)
        return (alpha.to(torch.float64) - self.alpha_lo) / span

    def forward(self, x: torch.Tensor, alpha: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_channels:
            raise ValueError(f"expected (B, {self.n_channels}) input, got {tuple(x.shape)}")
        if cond.shape != (x.shape[0], self.cond_size):
            raise ValueError(f"expected ({x.shape[0]}, {self.cond_size}) condition, got {tuple(cond.shape)}")
        alpha = torch.as_tensor(alpha, device=x.device).reshape(-1).expand(x.shape[0])
        level = self.rescale_alpha(alpha).to(x.dtype)
        h = F.leaky_relu(self.input_conv(x[:, None, :]), 0.4) + self.embedding(level)[:, :, None]
        c = F.leaky_relu(self.cond_proj(cond), 0.4)[:, None, :]
        skips = 0
        for block in self.blocks:
            h, s = block(h, c)
            skips = skips + s
        skips = skips / math.sqrt(len(self.blocks))
        out = self.output(F.relu(self.skip_proj(F.relu(skips))))
        return out[:, 0, :]


class TFDPM(nn.Module):
    """Feature extractor plus conditional noise network sharing one schedule."""

    def __init__(self, extractor: Extractor, schedule: NoiseSchedule, weighting: str = "snr", **eps_kwargs):
        super().__init__()
        if weighting not in ("snr", "uniform"):
            raise ConfigurationError(f"unknown loss weighting {weighting!r}")
        self.extractor = extractor
        self.schedule = schedule
        self.weighting = weighting
        self.eps_net = EpsNetwork(
            extractor.n_channels,
            extractor.hidden_size,
            alpha_range=(schedule.alpha[schedule.n_steps], schedule.alpha[1]),
            **eps_kwargs,
        )

    @property
    def n_channels(self) -> int:
        return self.extractor.n_channels

    def forward(self, histories: torch.Tensor, x0: torch.Tensor, n: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Per-row weighted loss for a batch."""
        return diffusion_loss(
            self.eps_net, self.schedule, x0, self.extractor(histories), n, eps, weighted=self.weighting == "snr"
        )


def diffusion_loss(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    cond: torch.Tensor,
    n,
    eps: torch.Tensor,
    weighted: bool = True,
) -> torch.Tensor:
    """(N/2)(SNR(n-1) - SNR(n)) * ||eps - eps_hat(x_n, alpha_n, F)||^2 per row.

    ``weighted=False`` drops the SNR factor (plain noise regression).
    """
    n = torch.as_tensor(n, dtype=torch.long).reshape(-1).expand(x0.shape[0])
    xn = forward_sample(schedule, x0, n, eps)
    alpha = _table(schedule.alpha, n, x0)
    weight = _table(schedule.snr[:-1] - schedule.snr[1:], n - 1, x0) * (schedule.n_steps / 2)
    err = eps - eps_fn(xn, alpha, cond)
    if not weighted:
        return (err**2).sum(dim=-1)
    return weight * (err**2).sum(dim=-1)


def implied_score(eps_fn: EpsFn, schedule: NoiseSchedule, xn: torch.Tensor, n, cond: torch.Tensor) -> torch.Tensor:
    """Score estimate -eps_hat / sqrt(1 - alpha_bar_n) of the noise parameterisation."""
    n = torch.as_tensor(n, dtype=torch.long).reshape(-1).expand(xn.shape[0])
    alpha = _table(schedule.alpha, n, xn)
    ab = _table(schedule.alpha_bar, n, xn)
    return -eps_fn(xn, alpha, cond) / (1 - ab).sqrt()[:, None]


# --------------------------------------------------------------------------- #
# sampling
# --------------------------------------------------------------------------- #


def sample(
    eps_fn: EpsFn,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    *,
    x_start: torch.Tensor | None = None,
    noise: bool = True,
    alpha_inputs: np.ndarray | None = None,
) -> torch.Tensor:
    """Ancestral sampling from step N down to 0; returns x^0 of shape (B, D).

    ``alpha_inputs[n]`` overrides the alpha value handed to ``eps_fn`` at step n
    (defaults to ``schedule.alpha``).
    """
    B = cond.shape[0]
    D = eps_fn.n_channels if x_start is None else x_start.shape[1]
    dtype = cond.dtype
    x = x_start if x_start is not None else torch.randn(B, D, generator=generator, dtype=dtype)
    alpha_inputs = schedule.alpha if alpha_inputs is None else alpha_inputs
    for n in range(schedule.n_steps, 0, -1):
        a, ab, b = schedule.alpha[n], schedule.alpha_bar[n], schedule.beta[n]
        eps_hat = eps_fn(x, torch.full((B,), alpha_inputs[n], dtype=torch.float64), cond)
        x = (x - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(a)
        if noise and n > 1:
            z = torch.randn(B, D, generator=generator, dtype=dtype)
            x = x + math.sqrt(schedule.posterior_beta[n]) * z
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite state at diffusion step {n}")
    return x


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


def make_optimizer(params, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr)


def train_step(
    model: TFDPM,
    optimizer: torch.optim.Optimizer,
    histories: torch.Tensor,
    targets: torch.Tensor,
    generator: torch.Generator | None = None,
    clip: float = 10.0,
) -> float:
    """Draw steps and noise, take one optimiser step on the mean loss."""
    if len(targets) == 0:
        raise ValueError("empty batch")
    N = model.schedule.n_steps
    n = torch.randint(1, N + 1, (len(targets),), generator=generator)
    eps = torch.randn(targets.shape, generator=generator, dtype=targets.dtype)
    model.train()
    optimizer.zero_grad()
    losses = model(histories, targets, n, eps)
    loss = losses.mean()
    if not torch.isfinite(loss):
        bad = int(torch.nonzero(~torch.isfinite(losses))[0, 0]) if (~torch.isfinite(losses)).any() else 0
        raise TrainingError(
            f"non-finite loss: n={int(n[bad])}, |x|={float(targets[bad].norm()):.4g}, "
            f"weight={float(model.schedule.loss_weight(int(n[bad]))):.4g}"
        )
    loss.backward()
    nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def evaluate_loss(model: TFDPM, histories: torch.Tensor, targets: torch.Tensor, seed: int = 0, batch_size: int = 500) -> float:
    """Mean loss with a fixed draw of steps/noise so epochs are comparable."""
    if len(targets) == 0:
        return float("nan")
    g = torch.Generator().manual_seed(seed)
    n = torch.randint(1, model.schedule.n_steps + 1, (len(targets),), generator=g)
    eps = torch.randn(targets.shape, generator=g, dtype=targets.dtype)
    model.eval()
    total = 0.0
    for i in range(0, len(targets), batch_size):
        sl = slice(i, i + batch_size)
        total += float(model(histories[sl], targets[sl], n[sl], eps[sl]).sum())
    return total / len(targets)


@dataclass
class FitResult:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    stopped_early: bool


def fit(
    model: TFDPM,
    windows: WindowBatch,
    *,
    epochs: int = 20,
    batch_size: int = 100,
    lr: float = 1e-3,
    patience: int = 3,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> FitResult:
    """Train extractor and noise network jointly with early stopping.

    The last ``val_fraction`` of the windows (in time order) is held out; the
    parameters of the best validation epoch are restored at the end.
    """
    dtype = next(model.parameters()).dtype
    H = torch.as_tensor(windows.histories, dtype=dtype)
    X = torch.as_tensor(windows.targets, dtype=dtype)
    n_val = int(round(len(X) * val_fraction))
    n_tr = len(X) - n_val
    if n_tr < 1:
        raise ConfigurationError("no training windows left after the validation split")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = make_optimizer(model.parameters(), lr)

    train_losses, val_losses = [], []
    best, best_epoch, best_state, bad_epochs = math.inf, 0, None, 0
    stopped = False
    for epoch in range(epochs):
        order = torch.as_tensor(rng.permutation(n_tr))
        batch_losses = [
            train_step(model, opt, H[idx], X[idx], gen)
            for idx in order.split(batch_size)
        ]
        train_losses.append(float(np.mean(batch_losses)))
        val = evaluate_loss(model, H[n_tr:], X[n_tr:], seed=seed + 1) if n_val else train_losses[-1]
        val_losses.append(val)
        log.info("epoch %d  train loss %.5g  val loss %.5g", epoch + 1, train_losses[-1], val)
        if val < best:
            best, best_epoch, bad_epochs = val, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                stopped = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return FitResult(train_losses, val_losses, best_epoch, stopped)
