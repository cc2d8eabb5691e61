"""
Learned noise schedules for fast detection
==========================================

Trains the scheduling network on top of a frozen detector, tunes the
starting noise level on a separate labelled series and compares noise
network calls and F1 against the full 100-step sampler.
"""
import torch

from tfdpm.dataset import SIM_CHANNELS, build_dataset, simulate_raw, synth_cps, window_arrays
from tfdpm.detection import detect
from tfdpm.diffusion import TFDPM, fit, linear_schedule
from tfdpm.extractors import build_extractor
from tfdpm.scheduler import SchedulerNet, train_scheduler, tune_init

train, test = synth_cps("easy", 5000, 2000, seed=0)
# tuning data: another plant run, scaled with the training statistics
_, val_raw, val_labels, _ = simulate_raw("easy", 5000, 2000, seed=1000)
validation = build_dataset(val_raw, SIM_CHANNELS, val_labels, stats=train.norm_stats)
torch.manual_seed(0)
model = TFDPM(build_extractor("tcn_gat", train.D, 12), linear_schedule(), weighting="uniform")
fit(model, window_arrays(train.values, 12), seed=0)

net = SchedulerNet(model.n_channels, model.extractor.hidden_size, tau=10)
train_scheduler(model, net, window_arrays(train.values, 12), seed=0)
tuned = tune_init(model, net, validation, 12, seed=0, max_calls=50)
print("start at alpha_bar=%.1f beta=%.1f" % (tuned.alpha_bar, tuned.beta))

full = detect(test, model, 12, seed=0)
fast = detect(test, model, 12, "fast", scheduler=net, seed=0)
print("full: f1 %.3f with %d calls per step" % (full.f1, full.eps_calls.max()))
print("fast: f1 %.3f with %.1f calls per step" % (fast.f1, fast.eps_calls.mean()))
