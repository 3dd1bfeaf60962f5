"""Dataset ingestion, splitting, windowing, and normalization.

Long-horizon datasets are single CSVs (timestamp column + one column
per channel). Short-horizon collections follow the M4 layout: one CSV
per frequency, each row a series id followed by its values.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import CapacityError, DataError, FormatError, ParseError, UsageError

NORM_EPS = 1e-5

# M4 conventions: forecast horizon and seasonal period per frequency.
M4_HORIZONS = {"yearly": 6, "quarterly": 8, "monthly": 18,
               "weekly": 13, "daily": 14, "hourly": 48}
M4_SEASONS = {"yearly": 1, "quarterly": 4, "monthly": 12,
              "weekly": 1, "daily": 1, "hourly": 24}
M4_OTHERS = ("weekly", "daily", "hourly")


@dataclass
class SeriesDataset:
    channels: list          # C column names
    values: np.ndarray      # N x C float32
    timestamps: list        # N ordered labels
    name: str = ""

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def view(self, start: int, stop: int, suffix: str = "") -> "SeriesDataset":
        return SeriesDataset(self.channels, self.values[start:stop],
                             self.timestamps[start:stop], name=self.name + suffix)


@dataclass
class WindowSpec:
    input_len: int = 96
    horizon: int = 96

    def __post_init__(self):
        if self.input_len < 1 or self.horizon < 1:
            raise UsageError(f"window spec needs positive lengths, got {self}")


@dataclass
class SplitSpec:
    """Chronological row boundaries plus the few-shot prefix fraction."""
    train_end: int
    val_end: int
    test_end: int
    few_shot_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.train_end <= self.val_end <= self.test_end:
            raise UsageError(f"split boundaries must be ordered, got {self}")
        if not 0.0 < self.few_shot_fraction <= 1.0:
            raise UsageError(f"few-shot fraction must be in (0, 1], got {self.few_shot_fraction}")

    @classmethod
    def from_ratios(cls, n: int, train: float = 0.7, val: float = 0.1,
                    few_shot_fraction: float = 1.0) -> "SplitSpec":
        train_end = int(n * train)
        val_end = train_end + int(n * val)
        return cls(train_end, val_end, n, few_shot_fraction)

    @classmethod
    def ett_hourly(cls, n: int, few_shot_fraction: float = 1.0) -> "SplitSpec":
        month = 30 * 24
        return cls(min(12 * month, n), min(16 * month, n), min(20 * month, n),
                   few_shot_fraction)

    @classmethod
    def ett_minute(cls, n: int, few_shot_fraction: float = 1.0) -> "SplitSpec":
        month = 30 * 24 * 4
        return cls(min(12 * month, n), min(16 * month, n), min(20 * month, n),
                   few_shot_fraction)

    @classmethod
    def from_mode(cls, mode: str, n: int, few_shot_fraction: float = 1.0) -> "SplitSpec":
        """Parse 'ratio:0.7:0.1:0.2', 'rows:800:100:100', 'ett_hourly', 'ett_minute'."""
        if mode == "ett_hourly":
            return cls.ett_hourly(n, few_shot_fraction)
        if mode == "ett_minute":
            return cls.ett_minute(n, few_shot_fraction)
        parts = mode.split(":")
        if parts[0] == "ratio" and len(parts) == 4:
            tr, va, _ = (float(p) for p in parts[1:])
            return cls.from_ratios(n, tr, va, few_shot_fraction)
        if parts[0] == "rows" and len(parts) == 4:
            a, b, c = (int(p) for p in parts[1:])
            return cls(a, a + b, min(a + b + c, n), few_shot_fraction)
        raise UsageError(f"unknown split mode {mode!r}")


@dataclass
class NormalizationState:
    """Per-channel window statistics for undoing instance normalization."""
    mean: np.ndarray   # (C,)
    std: np.ndarray    # (C,), already clamped by eps
    eps: float = NORM_EPS

    def denormalize_rows(self, rows: np.ndarray) -> np.ndarray:
        """Undo normalization for time-major data (... x C last axis)."""
        return rows * self.std + self.mean

    def denormalize_channel_major(self, arr: np.ndarray) -> np.ndarray:
        """Undo normalization for (C, H) forecasts."""
        return arr * self.std[:, None] + self.mean[:, None]


def _parse_stamp(s: str):
    try:
        return datetime.fromisoformat(s)
    except ValueError:
        return None


def _check_monotonic(timestamps, path):
    parsed = [_parse_stamp(t) for t in timestamps]
    keys = parsed if all(p is not None for p in parsed) else timestamps
    for i in range(1, len(keys)):
        if keys[i] <= keys[i - 1]:
            raise DataError(
                f"{path}: timestamps not strictly increasing at row {i + 1} "
                f"({timestamps[i - 1]!r} -> {timestamps[i]!r})")


def load_csv(path) -> SeriesDataset:
    """Load a 'date,<ch1>,<ch2>,...' CSV, preserving column and row order."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise FormatError(f"{path}: header must name a timestamp and at least one channel")
        channels = header[1:]
        timestamps, rows = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            timestamps.append(row[0])
            vals = []
            for c, cell in enumerate(row[1:], start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {r}, column {c} ({cell!r})") from None
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data rows after the header")
    _check_monotonic(timestamps, path)
    return SeriesDataset(channels=channels,
                         values=np.asarray(rows, dtype=np.float32),
                         timestamps=timestamps,
                         name=path.stem)


def split(dataset: SeriesDataset, spec: SplitSpec,
          window: WindowSpec | None = None):
    """Chronological train/val/test views; train keeps the few-shot prefix."""
    n = len(dataset)
    if spec.test_end > n:
        raise CapacityError(f"split needs {spec.test_end} rows, dataset has {n}")
    train_rows = int(spec.few_shot_fraction * spec.train_end)
    train = dataset.view(0, train_rows, "/train")
    val = dataset.view(spec.train_end, spec.val_end, "/val")
    test = dataset.view(spec.val_end, spec.test_end, "/test")
    if window is not None:
        need = window.input_len + window.horizon
        for part in (train, val, test):
            if len(part) < need:
                raise CapacityError(
                    f"{part.name}: {len(part)} rows cannot hold one "
                    f"({window.input_len} + {window.horizon})-row window; need {need}")
    return train, val, test


def windows(view: SeriesDataset, spec: WindowSpec):
    """All stride-1 (input, target) windows; the final partial batch is kept.

    Yields (T x C, H x C) float32 array pairs; exactly
    N - T - H + 1 of them.
    """
    n = len(view)
    t, h = spec.input_len, spec.horizon
    if n < t + h:
        raise CapacityError(f"{view.name or 'view'}: {n} rows < one window of {t} + {h}")
    for start in range(n - t - h + 1):
        yield view.values[start:start + t], view.values[start + t:start + t + h]


def window_count(view_len: int, spec: WindowSpec) -> int:
    return view_len - spec.input_len - spec.horizon + 1


def instance_normalize(window: np.ndarray, eps: float = NORM_EPS):
    """Per-channel standardization over one T x C input window."""
    window = np.asarray(window)
    mean = window.mean(axis=0)
    std = np.maximum(window.std(axis=0), eps)
    return (window - mean) / std, NormalizationState(mean=mean, std=std, eps=eps)


def normalize_batch(inputs: np.ndarray, eps: float = NORM_EPS):
    """Vectorized instance normalization for a (B, T, C) stack.

    Returns (normalized, mean (B, C), std (B, C)).
    """
    mean = inputs.mean(axis=1)
    std = np.maximum(inputs.std(axis=1), eps)
    return (inputs - mean[:, None, :]) / std[:, None, :], mean, std


# ---------------------------------------------------------------------------
# M4-style univariate collections
# ---------------------------------------------------------------------------

@dataclass
class M4Series:
    sid: str
    insample: np.ndarray        # training values
    outsample: np.ndarray | None  # test values (length == horizon) when present
    horizon: int
    season: int

    @property
    def input_len(self) -> int:
        return 2 * self.horizon


@dataclass
class M4Collection:
    frequency: str
    series: list = field(default_factory=list)

    def __len__(self):
        return len(self.series)

    @property
    def horizons(self) -> dict:
        return {s.sid: s.horizon for s in self.series}


def _read_m4_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = row[0].strip().strip('"')
            vals = []
            for c, cell in enumerate(row[1:], start=2):
                cell = cell.strip().strip('"')
                if cell == "" or cell.upper() == "NA":
                    break
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {r}, column {c} ({cell!r})") from None
            yield sid, np.asarray(vals, dtype=np.float32)


def _load_m4_frequency(directory: Path, frequency: str) -> list:
    horizon = M4_HORIZONS[frequency]
    season = M4_SEASONS[frequency]
    train_path = directory / f"{frequency.capitalize()}-train.csv"
    test_path = directory / f"{frequency.capitalize()}-test.csv"
    if not train_path.exists():
        raise FormatError(f"missing M4 file {train_path}")
    outsamples = {}
    if test_path.exists():
        outsamples = {sid: vals for sid, vals in _read_m4_rows(test_path)}
    series = []
    for sid, vals in _read_m4_rows(train_path):
        if vals.size < 3 * horizon:
            warnings.warn(f"{sid}: series of length {vals.size} < 3 x horizon "
                          f"({3 * horizon}); skipped")
            continue
        series.append(M4Series(sid=sid, insample=vals,
                               outsample=outsamples.get(sid),
                               horizon=horizon, season=season))
    return series


def load_m4(directory, frequency: str) -> M4Collection:
    """Load one M4 frequency (or 'others' = weekly + daily + hourly).

    Horizons follow the competition convention; input length is twice
    the horizon, and the in-sample tail is retained for MASE scaling.
    """
    directory = Path(directory)
    frequency = frequency.lower()
    if frequency in M4_HORIZONS:
        groups = (frequency,)
    elif frequency == "others":
        groups = tuple(f for f in M4_OTHERS if (directory / f"{f.capitalize()}-train.csv").exists())
        if not groups:
            raise FormatError(f"no weekly/daily/hourly M4 files under {directory}")
    else:
        raise UsageError(
            f"unknown M4 frequency {frequency!r}; expected one of "
            f"{sorted(M4_HORIZONS)} or 'others'")
    collection = M4Collection(frequency=frequency)
    for group in groups:
        collection.series.extend(_load_m4_frequency(directory, group))
    return collection
