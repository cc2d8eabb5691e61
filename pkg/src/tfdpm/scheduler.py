"""Learned noise scheduling for short reverse processes.

A small network ``sigma_phi(x_n, F_t) in (0, 1)`` picks each next noise scale
as a fraction of the largest admissible value, so the sampler can build a
short, condition-specific schedule on the fly instead of walking all N steps.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import ConfigurationError, WindowBatch
from .diffusion import TFDPM, NoiseSchedule, SamplingError, sample

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class SchedulerNet(nn.Module):
    """Two-layer perceptron on ``[x_n ; F_t]`` with a sigmoid head."""

    def __init__(
        self,
        n_channels: int,
        cond_size: int,
        hidden: int = 64,
        tau: int = 10,
        init_alpha_bar: float = 0.5,
        init_beta: float = 0.3,
        beta_floor: float = 1e-4,
    ):
        super().__init__()
        if tau < 1:
            raise ConfigurationError("tau must be >= 1")
        self.n_channels = n_channels
        self.cond_size = cond_size
        self.tau = tau
        self.init_alpha_bar = init_alpha_bar
        self.init_beta = init_beta
        self.beta_floor = beta_floor
        self.net = nn.Sequential(
            nn.Linear(n_channels + cond_size, hidden), nn.SiLU(), nn.Linear(hidden, 1)
        )

    def forward(self, xn: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([xn, cond], dim=-1)))[:, 0]


def beta_bound(beta_next, alpha_bar_next):
    """Largest admissible scale below ``beta_next``: min(1 - abar'/(1 - beta'), beta')."""
    if isinstance(beta_next, torch.Tensor) or isinstance(alpha_bar_next, torch.Tensor):
        b = torch.as_tensor(beta_next)
        return torch.minimum(1 - alpha_bar_next / (1 - b), b)
    return np.minimum(1 - np.asarray(alpha_bar_next) / (1 - np.asarray(beta_next)), beta_next)


def next_beta(sigma, beta_next, alpha_bar_next):
    """Scale the admissible bound by the network output ``sigma``."""
    bound = beta_bound(beta_next, alpha_bar_next)
    bad = bound <= 0
    if bool(bad.any() if isinstance(bad, torch.Tensor) else np.any(bad)):
        raise ScheduleError("no admissible noise scale: need alpha_bar_next < 1 - beta_next")
    return bound * sigma


def stride_beta(schedule: NoiseSchedule, n, tau: int):
    """Single scale equivalent to ``tau`` steps from step n: 1 - abar_{n+tau}/abar_n."""
    n = np.asarray(n)
    return 1.0 - schedule.alpha_bar[n + tau] / schedule.alpha_bar[n]


def c_term(beta_hat, alpha_bar_hat, D: int):
    """1/4 log((1 - abar)/beta) + D/2 (beta/(1 - abar) - 1)."""
    lib = torch if isinstance(beta_hat, torch.Tensor) else np
    s = 1 - alpha_bar_hat
    return 0.25 * lib.log(s / beta_hat) + D / 2 * (beta_hat / s - 1)


def scheduler_loss(eps, eps_hat, beta_hat, alpha_bar_hat):
    """Per-row scheduler objective.

    ``||sqrt(1-abar) eps - beta/sqrt(1-abar) eps_hat||^2 / (2 (1 - beta - abar))``
    plus :func:`c_term`. Requires ``beta_hat + alpha_bar_hat < 1``.
    """
    lib = torch if isinstance(eps, torch.Tensor) else np
    if lib is np:
        beta_hat, alpha_bar_hat = np.asarray(beta_hat, dtype=np.float64), np.asarray(alpha_bar_hat, dtype=np.float64)
    s = 1 - alpha_bar_hat
    gap = s - beta_hat
    if bool((gap <= 0).any()):
        raise ScheduleError("loss undefined for beta_hat + alpha_bar_hat >= 1")
    col = lambda v: v[..., None] if v.ndim else v  # noqa: E731
    resid = lib.sqrt(col(s)) * eps - col(beta_hat) / lib.sqrt(col(s)) * eps_hat
    D = eps.shape[-1]
    return (resid**2).sum(-1) / (2 * gap) + c_term(beta_hat, alpha_bar_hat, D)


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


def _scheduler_batch(model: TFDPM, net: SchedulerNet, cond, x0, n, eps):
    sch = model.schedule
    dt = x0.dtype
    ab = torch.as_tensor(sch.alpha_bar[n], dtype=dt)
    alpha_in = torch.as_tensor(sch.alpha[n], dtype=torch.float64)
    beta_up = torch.as_tensor(stride_beta(sch, n, net.tau), dtype=dt)
    ab_up = torch.as_tensor(sch.alpha_bar[n + net.tau], dtype=dt)
    xn = ab.sqrt()[:, None] * x0 + (1 - ab).sqrt()[:, None] * eps
    with torch.no_grad():
        eps_hat = model.eps_net(xn, alpha_in, cond)
    beta_hat = next_beta(net(xn, cond), beta_up, ab_up)
    return eps_hat, beta_hat, ab


def _draw_steps(rng: np.random.Generator, size: int, n_steps: int, tau: int) -> np.ndarray:
    return rng.integers(2, n_steps - tau + 1, size=size)


def scheduler_batch_loss(model, net, cond, x0, n, eps, rng=None, max_redraw: int = 10):
    """Mean loss over a batch; rows with ``beta_hat + alpha_bar_hat >= 1`` get a new step."""
    n = np.asarray(n).copy()
    for _ in range(max_redraw + 1):
        eps_hat, beta_hat, ab = _scheduler_batch(model, net, cond, x0, n, eps)
        bad = ((1 - ab - beta_hat) <= 0).numpy()
        if not bad.any() or rng is None:
            break
        n[bad] = _draw_steps(rng, int(bad.sum()), model.schedule.n_steps, net.tau)
    keep = torch.as_tensor(~bad)
    if not keep.any():
        raise ScheduleError("every row of the batch is outside the loss domain")
    return scheduler_loss(eps[keep], eps_hat[keep], beta_hat[keep], ab[keep]).mean()


@dataclass
class SchedulerFitResult:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int


def train_scheduler(
    model: TFDPM,
    net: SchedulerNet,
    windows: WindowBatch,
    *,
    epochs: int = 20,
    batch_size: int = 100,
    lr: float = 1e-3,
    patience: int = 3,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> SchedulerFitResult:
    """Fit ``net`` against the frozen ``model``; only the scheduler's weights move."""
    N = model.schedule.n_steps
    if not 2 <= net.tau <= N - 2:
        raise ConfigurationError(f"tau must lie in 2..{N - 2}")
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        H = torch.as_tensor(windows.histories, dtype=dtype)
        cond_all = torch.cat([model.extractor(h) for h in H.split(1000)])
    X = torch.as_tensor(windows.targets, dtype=dtype)
    n_val = int(round(len(X) * val_fraction))
    n_tr = len(X) - n_val
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    val_rng = np.random.default_rng(seed + 1)
    val_n = _draw_steps(val_rng, n_val, N, net.tau)
    val_eps = torch.as_tensor(val_rng.standard_normal((n_val, X.shape[1])), dtype=dtype)

    train_losses, val_losses = [], []
    best, best_epoch, best_state, bad_epochs = math.inf, 0, None, 0
    try:
        for epoch in range(epochs):
            net.train()
            losses = []
            for idx in torch.as_tensor(rng.permutation(n_tr)).split(batch_size):
                n = _draw_steps(rng, len(idx), N, net.tau)
                eps = torch.randn(len(idx), X.shape[1], generator=gen, dtype=dtype)
                loss = scheduler_batch_loss(model, net, cond_all[idx], X[idx], n, eps, rng)
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(net.parameters(), 10.0)
                opt.step()
                losses.append(float(loss.detach()))
            train_losses.append(float(np.mean(losses)))
            net.eval()
            if n_val:
                with torch.no_grad():
                    val = float(scheduler_batch_loss(
                        model, net, cond_all[n_tr:], X[n_tr:], val_n, val_eps
                    ))
            else:
                val = train_losses[-1]
            val_losses.append(val)
            log.info("scheduler epoch %d  train %.5g  val %.5g", epoch + 1, train_losses[-1], val)
            if val < best:
                best, best_epoch, bad_epochs = val, epoch, 0
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
            else:
                bad_epochs += 1
                if bad_epochs >= patience:
                    break
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return SchedulerFitResult(train_losses, val_losses, best_epoch)


# --------------------------------------------------------------------------- #
# fast sampling
# --------------------------------------------------------------------------- #


@dataclass
class FastScheduleTrace:
    """Per-row record of a batched fast-sampling run."""

    betas_used: list[np.ndarray]  # accepted scales, top of stack (largest) first
    bounds: list[np.ndarray]  # admissible bound for each accepted scale after the first
    rejected: list[float | None]  # candidate that fell below the floor, if any
    n_calls: np.ndarray
    stop_reason: list[str]
    fallback: bool = False

    def row(self, i: int) -> dict:
        return {
            "betas_used": self.betas_used[i],
            "bounds": self.bounds[i],
            "rejected": self.rejected[i],
            "n_calls": int(self.n_calls[i]),
            "stop_reason": self.stop_reason[i],
        }


def matched_alpha(schedule: NoiseSchedule, alpha_bar) -> np.ndarray:
    """Training-schedule alpha at the step whose alpha_bar equals ``alpha_bar``
    (linear interpolation, clamped to the schedule's range)."""
    ab = schedule.alpha_bar[1:][::-1]
    al = schedule.alpha[1:][::-1]
    return np.interp(np.asarray(alpha_bar, dtype=np.float64), ab, al)


def _eps_alpha(schedule, alpha_bar, beta, mode):
    if mode == "matched":
        return matched_alpha(schedule, alpha_bar)
    return 1.0 - np.asarray(beta)


@torch.no_grad()
def fast_sample(
    model: TFDPM,
    net: SchedulerNet,
    cond: torch.Tensor,
    generator: torch.Generator | None = None,
    *,
    alpha_bar_init: float | None = None,
    beta_init: float | None = None,
    beta_floor: float | None = None,
    alpha_input: str = "matched",
    noise: bool = True,
) -> tuple[torch.Tensor, FastScheduleTrace]:
    """Build a short schedule per row with ``net``, then run ancestral sampling on it.

    Construction starts from Gaussian noise at ``(alpha_bar_init, beta_init)``
    and takes reverse steps while proposing ever smaller scales; it stops once
    a proposal drops below ``beta_floor`` (default: the training schedule's
    smallest scale). The accepted scales, smallest first, form the schedule
    for a fresh reverse pass.

    ``alpha_input`` selects what the noise network sees as its step input:
    ``"matched"`` uses the training-schedule alpha at the same noise level,
    ``"literal"`` passes ``1 - beta_hat``.
    """
    sch = model.schedule
    ab0 = net.init_alpha_bar if alpha_bar_init is None else alpha_bar_init
    b0 = net.init_beta if beta_init is None else beta_init
    floor = sch.beta[1] if beta_floor is None else beta_floor
    if alpha_input not in ("matched", "literal"):
        raise ConfigurationError(f"unknown alpha_input {alpha_input!r}")
    if not (0 < ab0 < 1 and 0 < b0 < 1):
        raise ScheduleError("initial alpha_bar and beta must lie in (0, 1)")
    if ab0 >= 1 - b0:
        raise ScheduleError(f"initial pair ({ab0}, {b0}) admits no smaller scale: need alpha_bar < 1 - beta")
    B, D = cond.shape[0], model.n_channels
    dtype = cond.dtype

    if b0 < floor:
        log.warning("initial scale below the floor; falling back to the full sampler")
        x = sample(model.eps_net, cond, sch, generator, noise=noise)
        calls = np.full(B, sch.n_steps)
        return x, FastScheduleTrace([np.array([])] * B, [np.array([])] * B, [None] * B, calls, ["exhausted"] * B, True)

    x = torch.randn(B, D, generator=generator, dtype=dtype)
    ab = np.full(B, ab0)
    b = np.full(B, b0)
    stacks = [[b0] for _ in range(B)]
    bounds = [[] for _ in range(B)]
    rejected: list[float | None] = [None] * B
    reason = ["exhausted"] * B
    calls = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)

    for _ in range(sch.n_steps - 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        ti = torch.as_tensor(idx)
        a_hat = 1 - b[idx]
        ab_prev = ab[idx] / a_hat
        post = (1 - ab_prev) / (1 - ab[idx]) * b[idx]
        xa = x[ti]
        eps_hat = model.eps_net(
            xa, torch.as_tensor(_eps_alpha(sch, ab[idx], b[idx], alpha_input)), cond[ti]
        )
        calls[idx] += 1
        coef = torch.as_tensor(b[idx] / np.sqrt(1 - ab[idx]), dtype=dtype)[:, None]
        xa = (xa - coef * eps_hat) / torch.as_tensor(np.sqrt(a_hat), dtype=dtype)[:, None]
        if noise:
            z = torch.randn(len(idx), D, generator=generator, dtype=dtype)
            xa = xa + torch.as_tensor(np.sqrt(post), dtype=dtype)[:, None] * z
        if not torch.isfinite(xa).all():
            raise SamplingError("non-finite state while building the schedule")
        x[ti] = xa
        bound = beta_bound(b[idx], ab[idx])
        sigma = net(xa, cond[ti]).to(torch.float64).numpy()
        cand = next_beta(sigma, b[idx], ab[idx])
        ab[idx] = ab_prev
        for k, i in enumerate(idx):
            if cand[k] < floor:
                rejected[i] = float(cand[k])
                reason[i] = "hit_floor"
                active[i] = False
            else:
                stacks[i].append(float(cand[k]))
                bounds[i].append(float(bound[k]))
        b[idx] = cand

    # final pass over the constructed schedules, smallest scale first
    lengths = np.array([len(s) for s in stacks])
    L = int(lengths.max())
    betas = np.full((B, L + 1), np.nan)
    for i, s in enumerate(stacks):
        betas[i, 1 : len(s) + 1] = s[::-1]
    alpha = 1 - betas
    alpha[:, 0] = 1.0
    alpha_bar = np.cumprod(np.nan_to_num(alpha, nan=1.0), axis=1)
    x = torch.randn(B, D, generator=generator, dtype=dtype)
    for k in range(L, 0, -1):
        idx = np.flatnonzero(lengths >= k)
        ti = torch.as_tensor(idx)
        bk, ak, abk, abp = betas[idx, k], alpha[idx, k], alpha_bar[idx, k], alpha_bar[idx, k - 1]
        eps_hat = model.eps_net(x[ti], torch.as_tensor(_eps_alpha(sch, abk, bk, alpha_input)), cond[ti])
        calls[idx] += 1
        coef = torch.as_tensor(bk / np.sqrt(1 - abk), dtype=dtype)[:, None]
        xa = (x[ti] - coef * eps_hat) / torch.as_tensor(np.sqrt(ak), dtype=dtype)[:, None]
        if noise and k > 1:
            post = (1 - abp) / (1 - abk) * bk
            z = torch.randn(len(idx), D, generator=generator, dtype=dtype)
            xa = xa + torch.as_tensor(np.sqrt(post), dtype=dtype)[:, None] * z
        if not torch.isfinite(xa).all():
            raise SamplingError(f"non-finite state at short-schedule step {k}")
        x[ti] = xa

    trace = FastScheduleTrace(
        [np.array(s) for s in stacks], [np.array(bd) for bd in bounds], rejected, calls, reason
    )
    return x, trace


# --------------------------------------------------------------------------- #
# initial-value search
# --------------------------------------------------------------------------- #

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class TuneResult:
    alpha_bar: float
    beta: float
    f1: float
    mean_calls: float
    table: list[dict] = field(default_factory=list)


def tune_init(
    model: TFDPM,
    net: SchedulerNet,
    validation,
    omega: int,
    *,
    grid=DEFAULT_GRID,
    seed: int = 0,
    max_calls: float | None = None,
) -> TuneResult:
    """Grid search over ``(alpha_bar_init, beta_init)`` for best validation F1.

    Pairs with ``alpha_bar + beta >= 1`` admit no schedule and are skipped.
    ``max_calls`` discards pairs whose mean noise-network calls per step
    exceed the budget. Ties go to fewer calls. The winning pair is written
    back onto ``net``.
    """
    from .detection import detect

    table = []
    for ab0, b0 in itertools.product(grid, grid):
        row = {"alpha_bar": ab0, "beta": b0, "f1": None, "mean_calls": None}
        if ab0 >= 1 - b0:
            row["skipped"] = "inadmissible"
            table.append(row)
            continue
        rep = detect(validation, model, omega, "fast", scheduler=net, seed=seed,
                     alpha_bar_init=ab0, beta_init=b0)
        row.update(f1=rep.f1, mean_calls=rep.extras["mean_eps_calls"])
        log.info("tune (%.1f, %.1f): f1 %.4f  calls %.1f", ab0, b0, rep.f1, row["mean_calls"])
        table.append(row)
    ok = [r for r in table if r["f1"] is not None and (max_calls is None or r["mean_calls"] <= max_calls)]
    if not ok:
        raise ScheduleError("no admissible grid pair meets the call budget")
    best = min(ok, key=lambda r: (-r["f1"], r["mean_calls"]))
    net.init_alpha_bar, net.init_beta = best["alpha_bar"], best["beta"]
    return TuneResult(best["alpha_bar"], best["beta"], best["f1"], best["mean_calls"], table)
