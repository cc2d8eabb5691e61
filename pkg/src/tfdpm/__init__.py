"""Conditional diffusion models for attack detection in multivariate CPS time series."""
from .dataset import (
    ChannelSpec,
    TimeSeriesDataset,
    WindowBatch,
    load_dataset,
    normalize,
    denormalize,
    sliding_windows,
    synth_cps,
)
from .diffusion import TFDPM, NoiseSchedule, linear_schedule, diffusion_loss, sample, fit
from .extractors import build_extractor
from .detection import anomaly_score, point_adjust, prf1, best_f1_search, detect
from .scheduler import SchedulerNet, train_scheduler, fast_sample, tune_init
from .config import RunConfig

__version__ = "0.1.0"
