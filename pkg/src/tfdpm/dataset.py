"""Ingestion, preprocessing, windowing and a small CPS simulator.

Values are kept as ``(T, D)`` float64 arrays. Discrete actuator channels are
one-hot expanded before normalization, so ``D`` counts expanded columns.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np


class SchemaError(ValueError):
    """Channel list and file header disagree."""


class DataParseError(ValueError):
    """A data row could not be parsed."""


class ConfigurationError(ValueError):
    """Invalid windowing/model configuration."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: Literal["continuous", "discrete"] = "continuous"
    cardinality: int | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise SchemaError(f"unknown channel kind {self.kind!r}")
        if self.kind == "discrete" and (self.cardinality is None or self.cardinality < 2):
            raise SchemaError(f"discrete channel {self.name!r} needs cardinality >= 2")

    @property
    def width(self) -> int:
        return self.cardinality if self.kind == "discrete" else 1

    def expanded_names(self) -> list[str]:
        if self.kind == "discrete":
            return [f"{self.name}={k}" for k in range(self.cardinality)]
        return [self.name]

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "discrete":
            d["cardinality"] = self.cardinality
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        return cls(d["name"], d.get("kind", "continuous"), d.get("cardinality"))


@dataclass
class TimeSeriesDataset:
    """Normalized multichannel series.

    ``channels`` holds the *source* channel specs; ``columns`` the expanded
    column names (one per entry along axis 1 of ``values``).
    """

    values: np.ndarray
    channels: list[ChannelSpec]
    norm_stats: np.ndarray
    labels: np.ndarray | None = None
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a T x D matrix")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise SchemaError("channel names must be unique")
        if not self.columns:
            self.columns = [n for c in self.channels for n in c.expanded_names()]
        if len(self.columns) != self.values.shape[1]:
            raise SchemaError(
                f"{self.values.shape[1]} value columns but channels expand to {len(self.columns)}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.values),):
                raise ValueError("labels must have length T")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowBatch:
    histories: np.ndarray  # (B, omega, D)
    targets: np.ndarray  # (B, D)
    time_indices: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.targets)


# --------------------------------------------------------------------------- #
# preprocessing
# --------------------------------------------------------------------------- #


def normalize(raw: np.ndarray, stats: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Min-max scale each column; returns ``(scaled, stats)``.

    ``stats`` is a ``(D, 2)`` array of per-column (min, max). Columns with
    ``max == min`` map to 0. Supplied stats are applied as-is, so values from
    another split may fall outside [0, 1].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.shape[0] < 1:
        raise ValueError("need at least one row")
    if stats is None:
        stats = np.stack([raw.min(axis=0), raw.max(axis=0)], axis=1)
    stats = np.asarray(stats, dtype=np.float64)
    lo, hi = stats[:, 0], stats[:, 1]
    span = hi - lo
    degenerate = span == 0
    scaled = (raw - lo) / np.where(degenerate, 1.0, span)
    scaled[:, degenerate] = 0.0
    return scaled, stats


def denormalize(scaled: np.ndarray, stats: np.ndarray) -> np.ndarray:
    stats = np.asarray(stats, dtype=np.float64)
    return np.asarray(scaled) * (stats[:, 1] - stats[:, 0]) + stats[:, 0]


def one_hot_expand(raw: np.ndarray, channels: Sequence[ChannelSpec]) -> np.ndarray:
    """Expand discrete source columns into ``cardinality`` indicator columns."""
    raw = np.asarray(raw, dtype=np.float64)
    cols = []
    for j, ch in enumerate(channels):
        col = raw[:, j]
        if ch.kind == "discrete":
            codes = col.astype(np.int64)
            if np.any(codes != col) or np.any(codes < 0) or np.any(codes >= ch.cardinality):
                bad = int(np.flatnonzero((codes != col) | (codes < 0) | (codes >= ch.cardinality))[0])
                raise DataParseError(
                    f"channel {ch.name!r}: value {col[bad]!r} at row {bad} outside 0..{ch.cardinality - 1}"
                )
            cols.append(np.eye(ch.cardinality)[codes])
        else:
            cols.append(col[:, None])
    return np.concatenate(cols, axis=1)


def build_dataset(
    raw: np.ndarray,
    channels: Sequence[ChannelSpec],
    labels: np.ndarray | None = None,
    stats: np.ndarray | None = None,
) -> TimeSeriesDataset:
    expanded = one_hot_expand(raw, channels)
    values, stats = normalize(expanded, stats)
    return TimeSeriesDataset(values=values, channels=list(channels), norm_stats=stats, labels=labels)


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #


def load_dataset(
    path: str | Path,
    spec: Sequence[ChannelSpec],
    stats: np.ndarray | None = None,
) -> TimeSeriesDataset:
    """Read a CSV with a header row; rows containing blanks/NaN are dropped.

    Pass the training set's ``norm_stats`` as ``stats`` when loading test data.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataParseError(f"{path}: empty file") from None
        names = [c.name for c in spec]
        unknown = [h for h in header if h not in names and h != "label"]
        if unknown:
            raise SchemaError(f"{path}: unknown channel(s) {unknown}")
        missing = [n for n in names if n not in header]
        if missing:
            raise SchemaError(f"{path}: channel(s) {missing} not in header")
        idx = [header.index(n) for n in names]
        label_idx = header.index("label") if "label" in header else None

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            cells = [row[i].strip() for i in idx]
            lab = row[label_idx].strip() if label_idx is not None else "0"
            if any(c == "" or c.lower() == "nan" for c in cells) or lab == "":
                continue
            try:
                vals = [float(c) for c in cells]
                lab_v = int(float(lab))
            except ValueError as exc:
                raise DataParseError(f"{path}: row {lineno}: {exc}") from None
            if any(np.isnan(v) for v in vals):
                continue
            if lab_v not in (0, 1):
                raise DataParseError(f"{path}: row {lineno}: label must be 0 or 1")
            rows.append(vals)
            labels.append(lab_v)
    if not rows:
        raise DataParseError(f"{path}: no complete rows")
    raw = np.asarray(rows, dtype=np.float64)
    return build_dataset(raw, spec, np.asarray(labels) if label_idx is not None else None, stats)


def write_csv(path: str | Path, raw: np.ndarray, channels: Sequence[ChannelSpec], labels=None) -> None:
    header = [c.name for c in channels] + (["label"] if labels is not None else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, row in enumerate(raw):
            cells = [
                str(int(v)) if ch.kind == "discrete" else repr(float(v)) for v, ch in zip(row, channels)
            ]
            if labels is not None:
                cells.append(str(int(labels[t])))
            w.writerow(cells)


def write_schema(path: str | Path, channels: Sequence[ChannelSpec]) -> None:
    Path(path).write_text(json.dumps({"channels": [c.to_dict() for c in channels]}, indent=2) + "\n")


def read_schema(path: str | Path) -> list[ChannelSpec]:
    try:
        doc = json.loads(Path(path).read_text())
        return [ChannelSpec.from_dict(d) for d in doc["channels"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: bad schema file ({exc})") from None


# --------------------------------------------------------------------------- #
# windows
# --------------------------------------------------------------------------- #


def window_arrays(values: np.ndarray, omega: int) -> WindowBatch:
    """All ``T - omega`` (history, target) pairs as one batch."""
    values = np.asarray(values)
    T = len(values)
    if omega < 1:
        raise ConfigurationError("window length must be >= 1")
    if T <= omega:
        raise ConfigurationError(f"series of length {T} too short for window {omega}")
    view = np.lib.stride_tricks.sliding_window_view(values, omega, axis=0)  # (T-omega+1, D, omega)
    histories = np.ascontiguousarray(view[:-1].transpose(0, 2, 1))
    return WindowBatch(histories, values[omega:].copy(), np.arange(omega, T))


def sliding_windows(
    ds: TimeSeriesDataset, omega: int, batch_size: int | None = None
) -> Iterator[WindowBatch]:
    """Yield windows in time order, ``batch_size`` pairs at a time (all at once if None)."""
    full = window_arrays(ds.values, omega)
    step = batch_size or len(full)
    for i in range(0, len(full), step):
        sl = slice(i, i + step)
        yield WindowBatch(full.histories[sl], full.targets[sl], full.time_indices[sl])


# --------------------------------------------------------------------------- #
# simulator
# --------------------------------------------------------------------------- #

SIM_CHANNELS = [
    ChannelSpec("FIT101"),  # raw-water inflow
    ChannelSpec("LIT101"),  # tank 1 level
    ChannelSpec("FIT201"),  # tank 1 -> tank 2 flow
    ChannelSpec("LIT201"),  # tank 2 level
    ChannelSpec("FIT301"),  # tank 2 -> tank 3 flow
    ChannelSpec("LIT301"),  # tank 3 level
    ChannelSpec("FIT401"),  # product outflow
    ChannelSpec("AIT201"),  # analyser, lagged in FIT301
    ChannelSpec("PIT501"),  # discharge pressure
    ChannelSpec("P101", "discrete", 2),
    ChannelSpec("P301", "discrete", 2),
]

_SENSORS = ["FIT101", "LIT101", "FIT201", "LIT201", "FIT301", "LIT301", "FIT401", "AIT201", "PIT501"]
_ACTUATORS = ["P101", "P301"]
_ATTACKS = ("bias", "stuck", "ramp", "flip")

# scenario -> (relative attack magnitude, measurement noise std in fractions of full scale)
_SCENARIOS = {"easy": (0.35, 0.004), "hard": (0.12, 0.008)}

_FULL_SCALE = {
    "FIT101": 2.5, "LIT101": 1000.0, "FIT201": 2.5, "LIT201": 1000.0, "FIT301": 2.5,
    "LIT301": 1000.0, "FIT401": 2.5, "AIT201": 300.0, "PIT501": 3.0,
}


@dataclass
class Attack:
    kind: str
    target: str
    start: int
    stop: int
    magnitude: float
    frozen: float | None = None


def _plan_attacks(rng: np.random.Generator, t_test: int, magnitude: float) -> list[Attack]:
    n_seg = max(5, min(10, t_test // 300))
    lo_ratio, hi_ratio = 0.06, 0.10
    total = int(rng.uniform(lo_ratio, hi_ratio) * t_test)
    cuts = np.sort(rng.choice(np.arange(1, total), size=n_seg - 1, replace=False))
    lengths = np.diff(np.concatenate([[0], cuts, [total]]))
    lengths = np.maximum(lengths, 5)
    # spread segments over the test span leaving quiet gaps between them
    slots = np.linspace(100, t_test - 20, n_seg + 1).astype(int)
    kinds = [_ATTACKS[i % len(_ATTACKS)] for i in range(n_seg)]
    rng.shuffle(kinds)
    attacks = []
    for k in range(n_seg):
        room = slots[k + 1] - slots[k] - lengths[k] - 20
        start = slots[k] + int(rng.integers(0, max(room, 1)))
        target = _ACTUATORS[int(rng.integers(2))] if kinds[k] == "flip" else _SENSORS[int(rng.integers(len(_SENSORS)))]
        sign = rng.choice([-1.0, 1.0])
        attacks.append(Attack(kinds[k], target, int(start), int(start + lengths[k]), float(sign * magnitude)))
    return attacks


def simulate_raw(
    scenario: str, t_train: int, t_test: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[Attack]]:
    """Run the three-tank plant; return ``(train_raw, test_raw, test_labels, attacks)``.

    Columns follow ``SIM_CHANNELS``: nine sensors in engineering units then two
    pump states in {0, 1}. The test split continues the training run; attacks
    tamper with readings (the level controllers act on the tampered readings)
    or flip a pump.
    """
    if scenario not in _SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}")
    if t_train <= 200 or t_test <= 200:
        raise ConfigurationError("simulator needs more than 200 steps per split")
    magnitude, noise = _SCENARIOS[scenario]
    rng = np.random.default_rng(seed)
    attacks = _plan_attacks(rng, t_test, magnitude)

    T = t_train + t_test
    out = np.empty((T, len(SIM_CHANNELS)))
    labels = np.zeros(T, dtype=np.int64)
    col = {c.name: i for i, c in enumerate(SIM_CHANNELS)}
    scale = np.array([_FULL_SCALE[s] for s in _SENSORS])

    # plant state in fractions of full scale
    l1, l2, l3 = rng.uniform(0.3, 0.7, size=3)
    fin = fout = 0.0
    ait = 0.5
    p1, p3 = 1, 0
    # slowly varying demand so cycles are not exactly periodic
    demand = 1.0
    meas = np.zeros(len(_SENSORS))
    for t in range(T):
        active = [a for a in attacks if a.start <= t - t_train < a.stop]

        demand = np.clip(demand + 0.002 * rng.standard_normal(), 0.85, 1.15)
        f12 = 0.018 * l1
        f23 = 0.02 * l2
        pressure = 0.2 + 0.5 * fout / 0.025 + 0.2 * l3
        true = np.array([fin, l1, f12, l2, f23, l3, fout, ait, pressure])
        true[[0, 2, 4, 6]] /= 0.05  # flows to fractions of full scale
        meas = true + noise * rng.standard_normal(len(_SENSORS))

        a_p1, a_p3 = p1, p3
        for a in active:
            if a.kind == "flip":
                if a.target == "P101":
                    a_p1 = 1 - p1
                else:
                    a_p3 = 1 - p3
                continue
            j = _SENSORS.index(a.target)
            k = t - t_train - a.start
            if a.kind == "bias":
                meas[j] += a.magnitude
            elif a.kind == "ramp":
                meas[j] += a.magnitude * 1.5 * (k + 1) / (a.stop - a.start)
            elif a.kind == "stuck":
                if k == 0:
                    a.frozen = meas[j] + 0.5 * a.magnitude
                meas[j] = a.frozen
        if active:
            labels[t] = 1

        out[t, : len(_SENSORS)] = meas * scale
        out[t, col["P101"]] = a_p1
        out[t, col["P301"]] = a_p3

        # hysteresis controllers read the (possibly tampered) level sensors
        if meas[1] < 0.25:
            p1 = 1
        elif meas[1] > 0.85:
            p1 = 0
        if meas[5] > 0.8:
            p3 = 1
        elif meas[5] < 0.2:
            p3 = 0

        fin += 0.25 * (a_p1 * 0.025 * demand - fin)
        fout += 0.25 * (a_p3 * 0.022 - fout)
        l1 = float(np.clip(l1 + fin - f12, 0.0, 1.0))
        l2 = float(np.clip(l2 + f12 - f23, 0.0, 1.0))
        l3 = float(np.clip(l3 + f23 - fout, 0.0, 1.0))
        ait += 0.05 * (0.3 + 0.6 * f23 / 0.02 - ait)

    return out[:t_train], out[t_train:], labels[t_train:], attacks


def synth_cps(
    scenario: str = "easy", T_train: int = 5000, T_test: int = 2000, seed: int = 0
) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Normalized (train, test) pair from :func:`simulate_raw`.

    Test data are scaled with the training statistics.
    """
    train_raw, test_raw, test_labels, _ = simulate_raw(scenario, T_train, T_test, seed)
    train = build_dataset(train_raw, SIM_CHANNELS, np.zeros(T_train, dtype=np.int64))
    test = build_dataset(test_raw, SIM_CHANNELS, test_labels, stats=train.norm_stats)
    return train, test
