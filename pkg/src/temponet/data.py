"""Multichannel series ingestion, resampling, normalisation and windowing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ForecastBatch

log = logging.getLogger(__name__)

TIME_COLUMN = "time_ms"
TARGET_CHANNEL = "knee_angle"


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass(frozen=True)
class SeriesTable:
    """Timestamps in milliseconds plus named float channels of equal length."""

    time_ms: np.ndarray
    channels: dict
    target: str = TARGET_CHANNEL
    dropped_rows: int = 0

    def __post_init__(self):
        n = len(self.time_ms)
        for name, col in self.channels.items():
            if len(col) != n:
                raise DataError(f"channel {name!r} has {len(col)} samples, expected {n}")
        if n > 1 and not np.all(np.diff(self.time_ms) > 0):
            raise DataError("timestamps must be strictly increasing")
        if self.target not in self.channels:
            raise DataError(f"target channel {self.target!r} not present")
        for arr in (self.time_ms, *self.channels.values()):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.time_ms)

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.channels[n] for n in names], axis=1)

    def slice(self, start: int, stop: int) -> "SeriesTable":
        return SeriesTable(self.time_ms[start:stop].copy(),
                           {k: v[start:stop].copy() for k, v in self.channels.items()},
                           self.target)

    def with_channels(self, channels: dict) -> "SeriesTable":
        return SeriesTable(self.time_ms, channels, self.target)


@dataclass
class CsvSchema:
    """Which columns to read: ``features=None`` means every non-time column."""

    target: str = TARGET_CHANNEL
    time_column: str = TIME_COLUMN
    features: Optional[list[str]] = None
    include_target: bool = True

    def input_names(self, table: SeriesTable) -> list[str]:
        names = list(self.features) if self.features else [
            n for n in table.names if n != self.target]
        if self.include_target and self.target not in names:
            names.append(self.target)
        if not self.include_target:
            names = [n for n in names if n != self.target]
        missing = [n for n in names if n not in table.channels]
        if missing:
            raise DataError(f"feature channels not present: {missing}")
        return names


def ingest_csv(path, schema: Optional[CsvSchema] = None) -> SeriesTable:
    """Parse a UTF-8 CSV with a header row; rows holding NaN or empty cells are dropped."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if schema.time_column not in header:
            raise DataError(f"{path}: missing time column {schema.time_column!r}")
        if schema.target not in header:
            raise DataError(f"{path}: missing target channel {schema.target!r}")
        rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            values = []
            for cell, name in zip(row, header):
                cell = cell.strip()
                try:
                    values.append(float(cell) if cell else math.nan)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: cannot parse {cell!r} in column {name!r}") from None
            if any(math.isnan(v) for v in values):
                dropped += 1
                continue
            rows.append(values)
    if dropped:
        log.warning("%s: dropped %d row(s) containing NaN", path, dropped)
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    cols = {name: data[:, i].copy() for i, name in enumerate(header)}
    t = cols.pop(schema.time_column)
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 1
        raise DataError(f"{path}: timestamps not strictly increasing at data row {bad + 1}")
    return SeriesTable(t, cols, schema.target, dropped)


def write_csv(table: SeriesTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([TIME_COLUMN, *table.names])
        for i in range(len(table)):
            w.writerow([repr(float(table.time_ms[i]))] + [repr(float(table.channels[n][i])) for n in table.names])


# -- resampling ------------------------------------------------------------

def upsample_linear(table: SeriesTable, from_period: float, to_period: float) -> SeriesTable:
    """Piecewise-linear interpolation onto a ``to_period`` grid; original samples kept exactly."""
    ratio = from_period / to_period
    if to_period <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise DataError(f"from_period {from_period} is not a multiple of to_period {to_period}")
    t = table.time_ms
    if len(t) > 1 and not np.allclose(np.diff(t), from_period):
        raise DataError(f"timestamps are not spaced at {from_period} ms")
    k = int(round(ratio))
    n_new = (len(t) - 1) * k + 1
    new_t = t[0] + np.arange(n_new) * to_period
    new_t[::k] = t
    out = {name: np.interp(new_t, t, col) for name, col in table.channels.items()}
    for name, col in table.channels.items():
        out[name][::k] = col
    return SeriesTable(new_t, out, table.target)


def downsample(table: SeriesTable, factor: int) -> SeriesTable:
    """Keep every ``factor``-th sample starting from the first."""
    return SeriesTable(table.time_ms[::factor].copy(),
                       {k: v[::factor].copy() for k, v in table.channels.items()}, table.target)


# -- splitting and normalisation -------------------------------------------

def split_train_test(table: SeriesTable, ratio: float = 0.8, min_length: int = 1):
    """Chronological split; the first ``floor(n * ratio)`` rows train."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(table)
    n_train = int(math.floor(n * ratio + 1e-9))
    if n_train < min_length or n - n_train < min_length:
        raise DataError(f"{n} rows cannot give {min_length} rows on both sides of a {ratio} split")
    return table.slice(0, n_train), table.slice(n_train, n)


@dataclass
class NormStats:
    """Per-channel mean and population standard deviation."""

    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    dropped: list[str] = field(default_factory=list)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def denormalize(self, values: np.ndarray, name: str) -> np.ndarray:
        i = self.index(name)
        return values * self.std[i] + self.mean[i]

    def to_dict(self) -> dict:
        return {"names": self.names, "mean": self.mean.tolist(), "std": self.std.tolist(),
                "dropped": self.dropped}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(list(d["names"]), np.array(d["mean"]), np.array(d["std"]), list(d.get("dropped", [])))


def fit_normalize(train: SeriesTable, names: Optional[Sequence[str]] = None,
                  strict: bool = False) -> NormStats:
    """Fit statistics on the training partition only.

    Zero-variance channels are dropped with a warning, or raise with
    ``strict=True``.  A constant target channel always raises.
    """
    names = list(names) if names is not None else train.names
    keep, mean, std, dropped = [], [], [], []
    for name in names:
        col = train.channels[name]
        sd = float(col.std())
        if sd == 0.0:
            if strict or name == train.target:
                raise DataError(f"channel {name!r} has zero variance on the training partition")
            log.warning("dropping zero-variance channel %r", name)
            dropped.append(name)
            continue
        keep.append(name)
        mean.append(float(col.mean()))
        std.append(sd)
    return NormStats(keep, np.array(mean), np.array(std), dropped)


def apply_normalize(table: SeriesTable, stats: NormStats) -> SeriesTable:
    out = {n: (table.channels[n] - m) / s for n, m, s in zip(stats.names, stats.mean, stats.std)}
    return SeriesTable(table.time_ms, out, table.target)


# -- windows ---------------------------------------------------------------

@dataclass
class WindowSpec:
    lookback: int = 128
    horizon: int = 1
    label_len: int = 64
    stride: int = 1

    def __post_init__(self):
        if min(self.lookback, self.horizon, self.stride) < 1 or self.label_len < 0:
            raise DataError(f"invalid window spec {self}")
        if self.label_len > self.lookback:
            raise DataError("label_len cannot exceed lookback")

    def count(self, length: int) -> int:
        span = self.lookback + self.horizon
        return 0 if length < span else (length - span) // self.stride + 1


def time_marks(time_ms: np.ndarray) -> np.ndarray:
    """Tick-phase features in [-0.5, 0.5): position within the second, 100 ms and 10 ms."""
    t = np.asarray(time_ms, dtype=np.float64)
    return np.stack([(t % p) / p - 0.5 for p in (1000.0, 100.0, 10.0)], axis=-1)


class WindowSet:
    """Lazily materialised sliding windows over one normalised table.

    Window ``i`` starts at row ``starts[i]``: the encoder sees
    ``[s, s + L)``, the target covers ``[s + L, s + L + H)`` and the decoder
    gets the last ``label_len`` encoder rows followed by ``H`` zero rows.
    """

    def __init__(self, table: SeriesTable, spec: WindowSpec, input_names: Sequence[str],
                 with_marks: bool = False):
        n = spec.count(len(table))
        if n == 0:
            raise DataError(f"series of length {len(table)} is shorter than lookback + horizon "
                            f"= {spec.lookback + spec.horizon}")
        self.spec = spec
        self.input_names = list(input_names)
        self.target_name = table.target
        self.inputs = table.matrix(self.input_names)
        self.target_series = np.asarray(table.channels[table.target])
        self.time_ms = np.asarray(table.time_ms)
        self.marks = time_marks(self.time_ms) if with_marks else None
        self.starts = np.arange(n) * spec.stride

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def target_index(self) -> Optional[int]:
        try:
            return self.input_names.index(self.target_name)
        except ValueError:
            return None

    def subset(self, idx) -> "WindowSet":
        out = object.__new__(WindowSet)
        out.__dict__.update(self.__dict__)
        out.starts = self.starts[idx]
        return out

    def batch(self, idx) -> ForecastBatch:
        s = self.starts[np.atleast_1d(idx)]
        L, H, lab = self.spec.lookback, self.spec.horizon, self.spec.label_len
        enc_rows = s[:, None] + np.arange(L)
        tgt_rows = s[:, None] + L + np.arange(H)
        enc_in = self.inputs[enc_rows]
        dec_in = np.concatenate([enc_in[:, L - lab:], np.zeros((len(s), H, enc_in.shape[2]))], axis=1)
        target = self.target_series[tgt_rows][:, :, None]
        enc_marks = dec_marks = None
        if self.marks is not None:
            enc_marks = self.marks[enc_rows]
            dec_marks = self.marks[s[:, None] + L - lab + np.arange(lab + H)]
        return ForecastBatch(enc_in, dec_in, target, enc_marks, dec_marks)

    def __getitem__(self, i) -> ForecastBatch:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        return self.batch([i % len(self)])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def iter_batches(self, batch_size: int, order: Optional[np.ndarray] = None):
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size])


def make_windows(table: SeriesTable, spec: WindowSpec, input_names: Optional[Sequence[str]] = None,
                 with_marks: bool = False) -> WindowSet:
    names = input_names if input_names is not None else table.names
    return WindowSet(table, spec, names, with_marks)


# -- synthetic gait --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Fixed generator parameters; the target stays inside ``target_range`` degrees."""

    period: int = 1000
    n_emg: int = 11
    n_imu: int = 24
    n_gon: int = 4
    knee_offset: float = 35.0
    knee_harmonics: tuple = ((22.0, 0.0), (9.0, 0.8), (3.0, 2.1))
    modulation_depth: float = 0.08
    modulation_period: int = 7300
    noise: float = 0.05

    @property
    def target_range(self) -> tuple[float, float]:
        amp = sum(a for a, _ in self.knee_harmonics) * (1.0 + self.modulation_depth)
        return self.knee_offset - amp, self.knee_offset + amp


def _knee(t: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    phase = 2 * np.pi * t / cfg.period
    wave = sum(a * np.sin((k + 1) * phase + p) for k, (a, p) in enumerate(cfg.knee_harmonics))
    envelope = 1.0 + cfg.modulation_depth * np.sin(2 * np.pi * t / cfg.modulation_period)
    return cfg.knee_offset + envelope * wave


def synth_gait(n: int, seed: int = 0, cfg: SynthConfig = SynthConfig()) -> SeriesTable:
    """Deterministic quasi-periodic stand-in for a 1 kHz gait recording.

    Pseudo-EMG channels are rectified bursts that lead the knee angle by
    30-100 ms; IMU and goniometer channels are phase-shifted, rescaled
    copies of the gait cycle.  Only the sensors carry noise.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    phase = 2 * np.pi * t / cfg.period
    channels: dict[str, np.ndarray] = {}
    for i in range(cfg.n_emg):
        lead = rng.uniform(30, 100)
        burst = np.abs(np.sin(2 * np.pi * (t + lead) / cfg.period + rng.uniform(0, np.pi)))
        channels[f"emg_{i:02d}"] = burst ** 3 + cfg.noise * rng.standard_normal(n)
    for i in range(cfg.n_imu):
        shift = rng.uniform(0, 2 * np.pi)
        harmonic = 1 + i % 3
        channels[f"imu_{i:02d}"] = (rng.uniform(0.5, 2.0) * np.sin(harmonic * phase + shift)
                                    + cfg.noise * rng.standard_normal(n))
    for i in range(cfg.n_gon):
        lead = rng.uniform(-50, 50)
        channels[f"gon_{i:02d}"] = (_knee(t + lead, cfg) * rng.uniform(0.3, 1.2)
                                    + cfg.noise * rng.standard_normal(n))
    channels[TARGET_CHANNEL] = _knee(t, cfg)
    return SeriesTable(t, channels, TARGET_CHANNEL)


# -- whole pipeline --------------------------------------------------------

@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats
    input_names: list[str]

    @property
    def target_index(self) -> Optional[int]:
        return self.train.target_index


def prepare(table: SeriesTable, spec: WindowSpec, schema: Optional[CsvSchema] = None,
            split_ratio: float = 0.8, val_fraction: float = 0.1, train_stride: Optional[int] = None,
            with_marks: bool = False) -> PreparedData:
    """Split, normalise with train-only statistics, and window all three partitions.

    Validation windows come from the last ``val_fraction`` of the training
    partition.  ``train_stride`` thins training windows only.
    """
    schema = schema or CsvSchema(target=table.target)
    span = spec.lookback + spec.horizon
    train, test = split_train_test(table, split_ratio, min_length=span)
    names = schema.input_names(table)
    stats = fit_normalize(train, list(dict.fromkeys([*names, table.target])))
    names = [n for n in names if n in stats.names]
    train_n, test_n = apply_normalize(train, stats), apply_normalize(test, stats)
    n_val = max(span, int(round(len(train_n) * val_fraction)))
    if len(train_n) - n_val < span:
        raise DataError("training partition too short to hold out a validation slice")
    fit_part = train_n.slice(0, len(train_n) - n_val)
    val_part = train_n.slice(len(train_n) - n_val, len(train_n))
    train_spec = spec if train_stride is None else WindowSpec(spec.lookback, spec.horizon,
                                                              spec.label_len, train_stride)
    return PreparedData(
        make_windows(fit_part, train_spec, names, with_marks),
        make_windows(val_part, spec, names, with_marks),
        make_windows(test_n, spec, names, with_marks),
        stats,
        names,
    )
