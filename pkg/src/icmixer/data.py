"""Dataset ingestion, sliding windows, channel capping, synthetic generators.

CSV layout follows the public long-horizon forecasting benchmarks: a header
row, a timestamp in the first column, and one numeric column per channel.
Row-wise splits default to 60/20/20 for the ETT files and 70/10/20 otherwise.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ConfigError


class ParseError(ValueError):
    """Raised when an input file cannot be ingested."""


@dataclass
class MultivariateSeries:
    name: str
    values: np.ndarray  # [T, m]
    channel_names: list
    split_bounds: tuple  # (train_end, val_end) row indices

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def region(self, split: str) -> tuple:
        """Half-open row range [lo, hi) of a split ('train' | 'val' | 'test')."""
        train_end, val_end = self.split_bounds
        if split == "train":
            return 0, train_end
        if split == "val":
            return train_end, val_end
        if split == "test":
            return val_end, len(self)
        raise ConfigError(f"unknown split {split!r}")


@dataclass
class MultivariateWindow:
    input: np.ndarray   # [m, lookback]
    target: np.ndarray  # [m, horizon]
    offset: int         # start row of the input slice in the source series


ETT_SPLIT = (0.6, 0.2, 0.2)
DEFAULT_SPLIT = (0.7, 0.1, 0.2)


def load_csv(path, name: str | None = None, split_fracs: tuple | None = None) -> MultivariateSeries:
    """Parse a benchmark CSV: header row, timestamp column, numeric channels."""
    path = Path(path)
    name = name or path.stem
    if split_fracs is None:
        split_fracs = ETT_SPLIT if name.upper().startswith("ETT") else DEFAULT_SPLIT
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        channel_names = header[1:]
        if not channel_names:
            raise ParseError(f"{path}: no channel columns in header")
        rows = []
        for row_idx, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {row_idx} has {len(row)} fields, header has {len(header)}")
            try:
                rows.append([float(cell) for cell in row[1:]])
            except ValueError:
                bad = next(i for i, cell in enumerate(row[1:], start=2)
                           if not _is_float(cell))
                raise ParseError(
                    f"{path}: non-numeric value at row {row_idx}, column {bad}") from None
    if not rows:
        raise ParseError(f"{path}: header only, no data rows")
    values = np.asarray(rows, dtype=np.float64)
    n = len(values)
    train_end = int(n * split_fracs[0])
    val_end = train_end + int(n * split_fracs[1])
    return MultivariateSeries(name=name, values=values, channel_names=channel_names,
                              split_bounds=(train_end, val_end))


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def save_csv(series: MultivariateSeries, path):
    """Write the same layout load_csv reads (timestamp column is the row index)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["date"] + list(series.channel_names))
        for t, row in enumerate(series.values):
            writer.writerow([t] + [repr(float(v)) for v in row])


def standardize_stats(series: MultivariateSeries) -> tuple:
    """Per-channel mean/std computed on the train split only."""
    lo, hi = series.region("train")
    train = series.values[lo:hi]
    return train.mean(axis=0), train.std(axis=0) + 1e-8


def standardized(series: MultivariateSeries) -> MultivariateSeries:
    mean, std = standardize_stats(series)
    return MultivariateSeries(name=series.name, values=(series.values - mean) / std,
                              channel_names=series.channel_names,
                              split_bounds=series.split_bounds)


def make_windows(series: MultivariateSeries, lookback: int = 256, horizon: int = 96,
                 stride: int = 1, split: str = "train") -> list:
    """All (input, target) windows fully inside the split region; no leakage."""
    lo, hi = series.region(split)
    region_len = hi - lo
    if region_len < lookback + horizon:
        warnings.warn(
            f"{series.name}/{split}: region of {region_len} rows too short for "
            f"lookback {lookback} + horizon {horizon}; no windows produced")
        return []
    windows = []
    for start in range(lo, hi - lookback - horizon + 1, stride):
        windows.append(MultivariateWindow(
            input=series.values[start:start + lookback].T,
            target=series.values[start + lookback:start + lookback + horizon].T,
            offset=start,
        ))
    return windows


def cap_channels(window: MultivariateWindow, cap: int = 8,
                 seed: int = 0) -> MultivariateWindow:
    """Sub-sample to at most `cap` channels (without replacement, seeded)."""
    if cap < 1:
        raise ConfigError(f"channel cap must be >= 1, got {cap}")
    m = window.input.shape[0]
    if m <= cap:
        return window
    pick = np.sort(np.random.default_rng(seed).choice(m, size=cap, replace=False))
    return MultivariateWindow(input=window.input[pick], target=window.target[pick],
                              offset=window.offset)


def partition_channels(m: int, cap: int = 8, seed: int = 0) -> list:
    """Split m channels into groups of exactly `cap`, oversampling the remainder.

    A shuffled partition into ceil(m / cap) groups; a final group smaller than
    `cap` is filled by repeating channels already used in earlier groups.
    """
    if cap < 1:
        raise ConfigError(f"channel cap must be >= 1, got {cap}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    groups = [order[i:i + cap].tolist() for i in range(0, m, cap)]
    if len(groups) > 1 and len(groups[-1]) < cap:
        used = np.concatenate(groups[:-1])
        fill = rng.choice(used, size=cap - len(groups[-1]), replace=False)
        groups[-1] = groups[-1] + fill.tolist()
    return groups


def generate_lagged_copy(m: int, T: int, lag: int, noise_std: float,
                         seed: int = 0) -> MultivariateSeries:
    """Synthetic series whose cross-channel structure is provably predictive.

    Channel 0 is an AR(1)-plus-sinusoid driver. Channel j > 0 repeats the
    driver delayed by j*lag steps plus Gaussian noise, so the next j*lag
    values of channel j are readable, noise-free, from channel 0's past.
    """
    if m < 2:
        raise ConfigError(f"need at least 2 channels, got {m}")
    if T <= m * lag:
        raise ConfigError(f"series length {T} too short for {m} channels at lag {lag}")
    rng = np.random.default_rng(seed)
    warmup = (m - 1) * lag
    total = T + warmup
    driver = np.zeros(total)
    phi, innov_std = 0.9, 0.3
    innovations = rng.standard_normal(total) * innov_std
    for t in range(1, total):
        driver[t] = phi * driver[t - 1] + innovations[t]
    t_axis = np.arange(total)
    driver = driver + np.sin(2 * np.pi * t_axis / 64.0)

    values = np.empty((T, m))
    values[:, 0] = driver[warmup:]
    for j in range(1, m):
        shifted = driver[warmup - j * lag:total - j * lag]
        values[:, j] = shifted + rng.standard_normal(T) * noise_std
    train_end = int(T * DEFAULT_SPLIT[0])
    val_end = train_end + int(T * DEFAULT_SPLIT[1])
    return MultivariateSeries(
        name=f"lagged(m={m},lag={lag},noise={noise_std})",
        values=values,
        channel_names=["driver"] + [f"copy_lag{j * lag}" for j in range(1, m)],
        split_bounds=(train_end, val_end))


def generate_linear_trend(T: int, seed: int = 0) -> MultivariateSeries:
    """Single-channel y_t = t, standardizable sanity-check series."""
    values = np.arange(float(T))[:, None]
    train_end = int(T * DEFAULT_SPLIT[0])
    val_end = train_end + int(T * DEFAULT_SPLIT[1])
    return MultivariateSeries(name="linear", values=values, channel_names=["y"],
                              split_bounds=(train_end, val_end))
