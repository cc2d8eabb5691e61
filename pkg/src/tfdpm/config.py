"""Run configuration with flat INI persistence."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import ConfigurationError

SECTION = "run"
SEED_ENV = "TFDPM_SEED"


@dataclass
class RunConfig:
    window: int = 12
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    batch_size: int = 100
    epochs: int = 20
    patience: int = 3
    val_fraction: float = 0.1
    learning_rate: float = 1e-3
    extractor: str = "tcn_gat"
    hidden_size: int = 64
    loss_weighting: str = "uniform"
    tau: int = 10
    alpha_bar_N: float = 0.5
    beta_N: float = 0.3
    seed: int = 0
    n_samples: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        if self.diffusion_steps < 2:
            raise ConfigurationError("diffusion_steps must be >= 2")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigurationError("require 0 < beta_start <= beta_end < 1")
        if self.extractor not in ("gru", "double_gat", "tcn_gat"):
            raise ConfigurationError(f"unknown extractor {self.extractor!r}")
        if self.extractor != "gru" and self.window < 2:
            raise ConfigurationError("graph extractors need window >= 2")
        if self.loss_weighting not in ("snr", "uniform"):
            raise ConfigurationError(f"unknown loss_weighting {self.loss_weighting!r}")
        for name in ("batch_size", "epochs", "hidden_size", "n_samples", "patience"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 2 <= self.tau <= self.diffusion_steps - 2:
            raise ConfigurationError("tau must lie in 2..diffusion_steps-2")
        if not (0 < self.alpha_bar_N < 1 and 0 < self.beta_N < 1):
            raise ConfigurationError("alpha_bar_N and beta_N must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            typ = known[k].type
            try:
                kw[k] = {"int": int, "float": float, "str": str}[typ](v)
            except ValueError:
                raise ConfigurationError(f"{k}: cannot parse {v!r} as {typ}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None = None, env: bool = True) -> "RunConfig":
        values = {}
        if path is not None:
            cp = configparser.ConfigParser()
            cp.optionxform = str
            if not cp.read(path):
                raise ConfigurationError(f"cannot read config file {path}")
            if SECTION not in cp:
                raise ConfigurationError(f"{path}: missing [{SECTION}] section")
            values = dict(cp[SECTION])
        if env and os.environ.get(SEED_ENV):
            values["seed"] = os.environ[SEED_ENV]
        return cls.from_dict(values)

    def save(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp[SECTION] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.to_dict().items()}
        with Path(path).open("w") as fh:
            cp.write(fh)
