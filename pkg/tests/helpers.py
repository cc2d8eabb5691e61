"""Small shared builders for tests."""
import numpy as np
import torch

from tfdpm.diffusion import TFDPM, linear_schedule
from tfdpm.extractors import build_extractor
from tfdpm.scheduler import SchedulerNet


def tiny_model(kind="gru", D=3, omega=6, N=100, hidden=8, seed=0):
    torch.manual_seed(seed)
    return TFDPM(build_extractor(kind, D, omega, hidden), linear_schedule(N), weighting="uniform")


def tiny_scheduler(model, seed=0, **kw):
    torch.manual_seed(seed)
    return SchedulerNet(model.n_channels, model.extractor.hidden_size, hidden=16, **kw)


def replay_bounds(betas_used, alpha_bar_init):
    """Admissible bound of each accepted scale after the first, rebuilt from the
    stack alone: abar_{k+1} = abar_k / (1 - beta_k)."""
    ab = alpha_bar_init
    out = []
    for b_next, b in zip(betas_used[:-1], betas_used[1:]):
        out.append(min(1 - ab / (1 - b_next), b_next))
        ab = ab / (1 - b_next)
    return np.array(out)


def sine_windows(T=800, D=3, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)[:, None]
    return 0.5 + 0.3 * np.sin(t / (4 + np.arange(D))) + 0.02 * rng.standard_normal((T, D))
