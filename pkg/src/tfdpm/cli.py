"""Command line: simulate | train | train-scheduler | detect | evaluate | plot.

Exit codes: 0 success, 2 usage, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import SEED_ENV, RunConfig
from .dataset import (
    ConfigurationError,
    DataParseError,
    SchemaError,
    SIM_CHANNELS,
    load_dataset,
    read_schema,
    simulate_raw,
    window_arrays,
    write_csv,
    write_schema,
)
from .detection import EvaluationError, anomaly_score, best_f1_search, predict
from .scheduler import ScheduleError

log = logging.getLogger("tfdpm")

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 2, 3, 4


class UsageError(Exception):
    pass


def _seed(args, default: int) -> int:
    if os.environ.get(SEED_ENV):
        return int(os.environ[SEED_ENV])
    return default if getattr(args, "seed", None) is None else args.seed


def _schema_for(data: Path, schema: str | None):
    path = Path(schema) if schema else data.with_name("schema.json")
    if not path.exists():
        raise SchemaError(f"no schema file at {path}; pass --schema")
    return read_schema(path)


# --------------------------------------------------------------------------- #


def cmd_simulate(args) -> None:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataParseError(f"cannot create {out}: {exc}") from None
    seed = _seed(args, 0)
    train, test, labels, attacks = simulate_raw(args.scenario, args.train_steps, args.test_steps, seed)
    write_csv(out / "train.csv", train, SIM_CHANNELS)
    write_csv(out / "test.csv", test, SIM_CHANNELS, labels)
    write_schema(out / "schema.json", SIM_CHANNELS)
    log.info("wrote %s (%d attack segments, anomaly ratio %.3f)", out, len(attacks), labels.mean())


def cmd_train(args) -> None:
    from .diffusion import fit

    config = RunConfig.load(args.config)
    if args.seed is not None and not os.environ.get(SEED_ENV):
        config.seed = args.seed
    data = Path(args.data)
    channels = _schema_for(data, args.schema)
    ds = load_dataset(data, channels)
    torch.manual_seed(config.seed)
    model = ckpt.build_model(config, ds.D)
    result = fit(
        model,
        window_arrays(ds.values, config.window),
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.learning_rate,
        patience=config.patience,
        val_fraction=config.val_fraction,
        seed=config.seed,
    )
    log.info("best epoch %d of %d", result.best_epoch + 1, len(result.train_losses))
    digest = ckpt.save_model(args.out, model, config, channels, ds.norm_stats)
    log.info("saved %s (sha256 %s)", args.out, digest[:12])


def cmd_train_scheduler(args) -> None:
    from .scheduler import SchedulerNet, train_scheduler, tune_init

    model, config, channels, stats, digest = ckpt.load_model(args.ckpt)
    seed = _seed(args, config.seed)
    ds = load_dataset(args.data, channels, stats)
    torch.manual_seed(seed)
    net = SchedulerNet(
        model.n_channels, model.extractor.hidden_size, tau=config.tau,
        init_alpha_bar=config.alpha_bar_N, init_beta=config.beta_N, beta_floor=model.schedule.beta[1],
    )
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_scheduler(
        model, net, window_arrays(ds.values, config.window),
        epochs=config.epochs, batch_size=config.batch_size, lr=config.learning_rate,
        patience=config.patience, val_fraction=config.val_fraction, seed=seed,
    )
    if not all(torch.equal(before[k], v) for k, v in model.state_dict().items()):
        raise RuntimeError("scheduler training modified the frozen model")
    if args.tune_data:
        val = load_dataset(args.tune_data, channels, stats)
        res = tune_init(model, net, val, config.window, seed=seed, max_calls=args.max_calls)
        log.info("tuned init (alpha_bar %.1f, beta %.1f): f1 %.4f, %.1f calls/step",
                 res.alpha_bar, res.beta, res.f1, res.mean_calls)
    ckpt.save_scheduler(args.out, net, digest)
    log.info("saved %s", args.out)


def cmd_detect(args) -> None:
    if args.mode == "fast" and not args.sched_ckpt:
        raise UsageError("--mode fast requires --sched-ckpt")
    model, config, channels, stats, digest = ckpt.load_model(args.ckpt)
    sched = ckpt.load_scheduler(args.sched_ckpt, digest) if args.mode == "fast" else None
    seed = _seed(args, config.seed)
    ds = load_dataset(args.data, channels, stats)
    w = window_arrays(ds.values, config.window)
    n_samples = args.n_samples or config.n_samples
    preds, calls = predict(model, w.histories, mode=args.mode, scheduler=sched, seed=seed, n_samples=n_samples)
    scores = anomaly_score(preds, w.targets)
    labels = ds.labels[w.time_indices] if ds.labels is not None else None
    if args.mode == "fast":
        for t, c in zip(w.time_indices, calls):
            log.debug("t=%d eps_calls=%d", t, c)
        log.info("fast sampler: %.2f noise-network calls per step (max %d)", calls.mean(), calls.max())

    out = Path(args.out)
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time_index", "score"] + (["label"] if labels is not None else []))
        for i, t in enumerate(w.time_indices):
            wr.writerow([int(t), repr(float(scores[i]))] + ([int(labels[i])] if labels is not None else []))
    cols = ds.columns
    with _sidecar(out, "predictions.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time_index", "eps_calls"] + [f"observed:{c}" for c in cols] + [f"predicted:{c}" for c in cols])
        for i, t in enumerate(w.time_indices):
            wr.writerow([int(t), int(calls[i])] + [repr(float(v)) for v in w.targets[i]]
                        + [repr(float(v)) for v in preds[i]])
    meta = {"mode": args.mode, "checkpoint_hash": digest, "seed": seed, "n_samples": n_samples,
            "mean_eps_calls": float(calls.mean())}
    _sidecar(out, "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    log.info("wrote %d scores to %s", len(scores), out)


def _sidecar(scores_path: Path, suffix: str) -> Path:
    return scores_path.with_name(scores_path.stem + "." + suffix)


def _read_scores(path: Path, need_labels: bool):
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataParseError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataParseError(f"{path}: no scores")
    if "score" not in rows[0] or "time_index" not in rows[0]:
        raise SchemaError(f"{path}: expected time_index and score columns")
    if need_labels and "label" not in rows[0]:
        raise SchemaError(f"{path}: missing label column")
    try:
        t = np.array([int(r["time_index"]) for r in rows])
        s = np.array([float(r["score"]) for r in rows])
        lab = np.array([int(r["label"]) for r in rows]) if "label" in rows[0] else None
    except ValueError as exc:
        raise DataParseError(f"{path}: {exc}") from None
    return t, s, lab


def cmd_evaluate(args) -> None:
    path = Path(args.scores)
    _, scores, labels = _read_scores(path, need_labels=True)
    rep = best_f1_search(scores, labels)
    meta_path = _sidecar(path, "meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    doc = {
        "threshold": rep.threshold,
        "precision": rep.precision,
        "recall": rep.recall,
        "f1": rep.f1,
        "q": rep.q,
        "mode": meta.get("mode"),
        "checkpoint_hash": meta.get("checkpoint_hash"),
    }
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    log.info("f1 %.4f (precision %.4f, recall %.4f) at threshold %.6g", rep.f1, rep.precision, rep.recall, rep.threshold)


def cmd_plot(args) -> None:
    path = Path(args.scores)
    t, scores, labels = _read_scores(path, need_labels=True)
    pred_path = _sidecar(path, "predictions.csv")
    if not pred_path.exists():
        raise DataParseError(f"missing {pred_path}; run detect first")
    with pred_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = {int(r[0]): r[2:] for r in reader}
    value_cols = header[2:]
    with Path(args.out).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + value_cols + ["score", "label"])
        for i, ti in enumerate(t):
            if int(ti) not in body:
                raise DataParseError(f"{pred_path}: no prediction for time index {ti}")
            wr.writerow([int(ti)] + body[int(ti)] + [repr(float(scores[i])), int(labels[i])])
    log.info("wrote %d rows to %s", len(t), args.out)


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfdpm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic train/test pair")
    s.add_argument("--scenario", choices=["easy", "hard"], default="easy")
    s.add_argument("--train-steps", type=int, default=5000)
    s.add_argument("--test-steps", type=int, default=2000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train extractor + noise network")
    s.add_argument("--data", required=True)
    s.add_argument("--schema")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-scheduler", help="train the noise-scheduling network")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tune-data", help="labelled CSV for the initial-value grid search")
    s.add_argument("--max-calls", type=float, help="call budget per step during the grid search")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_scheduler)

    s = sub.add_parser("detect", help="score a series")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sched-ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["full", "fast"], default="full")
    s.add_argument("--n-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", help="best point-adjusted F1 over thresholds")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="emit aligned observed/predicted/score columns")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigurationError, ScheduleError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataParseError, SchemaError, EvaluationError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ckpt.CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CHECKPOINT
    return 0


if __name__ == "__main__":
    sys.exit(main())
