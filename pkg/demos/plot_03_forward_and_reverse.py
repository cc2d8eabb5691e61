"""
Corrupting and denoising one vector
===================================

The forward process in closed form, and the reverse sampler with a
perfect noise predictor, on a linear 100-step schedule.
"""
import math

import numpy as np
import torch

from tfdpm.diffusion import forward_sample, linear_schedule, posterior_params, sample

s = linear_schedule(100, 1e-4, 1e-2)
print("alpha_bar_100 = %.4f, SNR(100) = %.4f" % (s.alpha_bar[100], s.snr[100]))

x0 = np.array([0.2, 0.7, 0.5])
eps = np.random.default_rng(0).standard_normal(3)
for n in (1, 10, 50, 100):
    print(n, np.round(forward_sample(s, x0, n, eps), 3))

mu, var = posterior_params(s, x0, forward_sample(s, x0, 50, eps), 50)
print("posterior at n=50:", np.round(mu, 3), round(var, 6))


# with eps_hat = 0 and no injected noise the sampler just rescales x_N
class Zero:
    n_channels = 3

    def __call__(self, x, alpha, cond):
        return torch.zeros_like(x)


xN = torch.ones(1, 3, dtype=torch.float64)
out = sample(Zero(), torch.zeros(1, 1, dtype=torch.float64), s, x_start=xN, noise=False)
print(out, 1 / math.sqrt(s.alpha_bar[100]))
