"""Anomaly scores, point-adjusted evaluation and best-F1 threshold search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import ConfigurationError, TimeSeriesDataset, window_arrays

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass
class DetectionReport:
    scores: np.ndarray
    threshold: float
    precision: float
    recall: float
    f1: float
    adjusted_predictions: np.ndarray
    time_indices: np.ndarray | None = None
    predictions: np.ndarray | None = None
    eps_calls: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.scores)

    def summary(self) -> dict:
        return {
            "threshold": float(self.threshold),
            "precision": float(self.precision),
            "recall": float(self.recall),
            "f1": float(self.f1),
            "q": self.q,
            **self.extras,
        }


def anomaly_score(pred, obs) -> np.ndarray | float:
    """Mean squared error over channels (last axis)."""
    pred, obs = np.asarray(pred, dtype=np.float64), np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    return ((pred - obs) ** 2).mean(axis=-1)


def segments(labels) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open ``(start, stop)`` pairs."""
    lab = np.asarray(labels).astype(np.int8)
    edges = np.diff(np.concatenate([[0], lab, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def point_adjust(scores, labels, threshold: float) -> np.ndarray:
    """Alerts are ``score > threshold``; any alert inside a labelled segment marks
    the whole segment as alerted."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    return adjust_predictions(scores > threshold, labels)


def adjust_predictions(raw, labels) -> np.ndarray:
    pred = np.asarray(raw).astype(bool).copy()
    for a, b in segments(labels):
        if pred[a:b].any():
            pred[a:b] = True
    return pred.astype(np.int64)


def _prf(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def prf1(adjusted, labels) -> tuple[float, float, float]:
    adjusted, labels = np.asarray(adjusted).astype(bool), np.asarray(labels).astype(bool)
    if adjusted.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    tp = np.sum(adjusted & labels)
    fp = np.sum(adjusted & ~labels)
    fn = np.sum(~adjusted & labels)
    p, r, f = _prf(tp, fp, fn)
    return float(p), float(r), float(f)


def candidate_thresholds(scores) -> np.ndarray:
    """Distinct scores plus one sentinel below (alert everywhere)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    below = u[0] - max(1.0, abs(u[0]))
    return np.concatenate([[below], u])


def best_f1_search(scores, labels) -> DetectionReport:
    """Scan every candidate threshold; keep max F1, ties to higher precision
    then to the lower threshold.

    Counts are computed for all thresholds at once: a segment is a true
    positive block iff its maximum score exceeds the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not labels.any():
        raise EvaluationError("labels contain no anomalies; F1 is undefined")
    cands = candidate_thresholds(scores)

    segs = segments(labels)
    seg_max = np.array([scores[a:b].max() for a, b in segs])
    seg_len = np.array([b - a for a, b in segs])
    # number of elements strictly greater than each threshold
    order = np.argsort(seg_max)
    cum_len = np.concatenate([[0], np.cumsum(seg_len[order])])
    n_not_above = np.searchsorted(seg_max[order], cands, side="right")
    tp = cum_len[-1] - cum_len[n_not_above]
    normal = np.sort(scores[labels == 0])
    fp = len(normal) - np.searchsorted(normal, cands, side="right")
    fn = labels.sum() - tp
    p, r, f = _prf(tp, fp, fn)

    # lexsort: last key is primary
    best = np.lexsort((cands, -p, -f))[0]
    thr = float(cands[best])
    adjusted = point_adjust(scores, labels, thr)
    return DetectionReport(scores, thr, float(p[best]), float(r[best]), float(f[best]), adjusted)


# --------------------------------------------------------------------------- #
# end-to-end detection
# --------------------------------------------------------------------------- #


@torch.no_grad()
def predict(
    model,
    histories: np.ndarray,
    *,
    mode: str = "full",
    scheduler=None,
    seed: int = 0,
    batch_size: int = 1024,
    n_samples: int = 1,
    **fast_kwargs,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one-step-ahead predictions for each history window.

    Returns ``(predictions, eps_calls)`` where ``eps_calls`` is the number of
    noise-network evaluations spent on each window.
    """
    from .diffusion import sample

    if mode not in ("full", "fast"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode == "fast" and scheduler is None:
        raise ConfigurationError("fast mode needs a trained scheduler")
    model.eval()
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    preds, calls = [], []
    for i in range(0, len(histories), batch_size):
        h = torch.as_tensor(histories[i : i + batch_size], dtype=dtype)
        cond = model.extractor(h)
        acc = 0
        c = np.zeros(len(h), dtype=np.int64)
        for _ in range(n_samples):
            if mode == "full":
                x = sample(model.eps_net, cond, model.schedule, gen)
                c += model.schedule.n_steps
            else:
                from .scheduler import fast_sample

                x, trace = fast_sample(model, scheduler, cond, gen, **fast_kwargs)
                c += trace.n_calls
            acc = acc + x
        preds.append((acc / n_samples).numpy())
        calls.append(c)
    return np.concatenate(preds), np.concatenate(calls)


def detect(
    test: TimeSeriesDataset,
    model,
    omega: int,
    mode: str = "full",
    *,
    scheduler=None,
    seed: int = 0,
    n_samples: int = 1,
    **fast_kwargs,
) -> DetectionReport:
    """Score every test step with a full history window and search the best threshold.

    Histories are the observed (possibly attacked) values. Returns a report
    with ``Q = T - omega`` scores.
    """
    if test.labels is None:
        raise EvaluationError("test data carry no labels")
    w = window_arrays(test.values, omega)
    preds, calls = predict(
        model, w.histories, mode=mode, scheduler=scheduler, seed=seed, n_samples=n_samples, **fast_kwargs
    )
    scores = anomaly_score(preds, w.targets)
    labels = test.labels[w.time_indices]
    report = best_f1_search(scores, labels)
    report.time_indices = w.time_indices
    report.predictions = preds
    report.eps_calls = calls
    report.extras.update(mode=mode, mean_eps_calls=float(calls.mean()), max_eps_calls=int(calls.max()))
    return report
