"""Versioned checkpoints: a plain-text header followed by a torch payload.

Header lines are ``key: value``; the header ends at the first blank line.
``sha256`` covers the payload bytes and is checked before anything is decoded.
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataset import ChannelSpec
from .diffusion import TFDPM, NoiseSchedule
from .extractors import build_extractor
from .scheduler import SchedulerNet

MAGIC = b"TFDPM-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write(path, kind: str, payload: dict, header_extra: dict) -> str:
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest()
    header = {"format_version": FORMAT_VERSION, "kind": kind, "sha256": digest, **header_extra}
    lines = [MAGIC] + [f"{k}: {v}".encode() for k, v in header.items()] + [b"", b""]
    Path(path).write_bytes(b"\n".join(lines) + body)
    return digest


def read_header(path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: not a checkpoint file")
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise CheckpointError(f"{path}: truncated header")
    header = {}
    for line in head.split(b"\n")[1:]:
        k, _, v = line.decode().partition(": ")
        header[k] = v
    try:
        version = int(header["format_version"])
    except (KeyError, ValueError):
        raise CheckpointError(f"{path}: missing format_version") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version}")
    if hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: content hash mismatch")
    return header, body


def _payload(body: bytes) -> dict:
    return torch.load(io.BytesIO(body), weights_only=True)


# --------------------------------------------------------------------------- #


def build_model(config: RunConfig, n_channels: int) -> TFDPM:
    from .diffusion import linear_schedule

    ext = build_extractor(config.extractor, n_channels, config.window, config.hidden_size)
    sch = linear_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return TFDPM(ext, sch, weighting=config.loss_weighting)


def save_model(path, model: TFDPM, config: RunConfig, channels, norm_stats) -> str:
    payload = {
        "state_dict": model.state_dict(),
        "n_channels": model.n_channels,
        "betas": torch.as_tensor(model.schedule.betas),
        "norm_stats": torch.as_tensor(np.asarray(norm_stats)),
        "channels": json.dumps([c.to_dict() for c in channels]),
        "config": json.dumps(config.to_dict()),
    }
    return _write(path, "tfdpm", payload, {"config": json.dumps(config.to_dict())})


def load_model(path):
    """Returns ``(model, config, channels, norm_stats, sha256)``."""
    header, body = read_header(path)
    if header.get("kind") != "tfdpm":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {header.get('kind')!r}")
    p = _payload(body)
    config = RunConfig.from_dict(json.loads(p["config"]))
    model = build_model(config, int(p["n_channels"]))
    model.schedule = NoiseSchedule.from_betas(p["betas"].numpy())
    try:
        model.load_state_dict(p["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the recorded config ({exc})") from None
    model.eval()
    channels = [ChannelSpec.from_dict(d) for d in json.loads(p["channels"])]
    return model, config, channels, p["norm_stats"].numpy(), header["sha256"]


def save_scheduler(path, net: SchedulerNet, base_hash: str) -> str:
    meta = {
        "tau": net.tau,
        "init_alpha_bar": net.init_alpha_bar,
        "init_beta": net.init_beta,
        "beta_floor": net.beta_floor,
        "n_channels": net.n_channels,
        "cond_size": net.cond_size,
        "hidden": net.net[0].out_features,
    }
    payload = {"state_dict": net.state_dict(), "meta": json.dumps(meta), "base_sha256": base_hash}
    return _write(path, "scheduler", payload, {"base_sha256": base_hash, "meta": json.dumps(meta)})


def load_scheduler(path, base_hash: str | None = None) -> SchedulerNet:
    header, body = read_header(path)
    if header.get("kind") != "scheduler":
        raise CheckpointError(f"{path}: expected a scheduler checkpoint, found {header.get('kind')!r}")
    if base_hash is not None and header.get("base_sha256") != base_hash:
        raise CheckpointError(f"{path}: trained against a different model checkpoint")
    p = _payload(body)
    meta = json.loads(p["meta"])
    net = SchedulerNet(
        meta["n_channels"], meta["cond_size"], meta["hidden"], meta["tau"],
        meta["init_alpha_bar"], meta["init_beta"], meta["beta_floor"],
    )
    net.load_state_dict(p["state_dict"])
    net.eval()
    return net
