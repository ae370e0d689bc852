"""Speed matrices: synthetic generation, CSV ingestion, normalization, windowing.

Stamps are 1-indexed throughout the public API: stamp ``t`` is row ``t - 1``
of ``SpeedMatrix.values``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    AllMissingColumnError,
    EmptyFileError,
    RaggedRowsError,
    TooShortError,
    WarmupTooSmallError,
)

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class SpeedMatrix:
    values: np.ndarray                 # (stamps, N)
    stamp_interval_minutes: float = 5.0
    period: int = 288
    sensor_ids: tuple[str, ...] = ()
    coords: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("speed matrix must be 2-D (stamps x clients)")
        if not np.all(np.isfinite(v)):
            raise ValueError("speed matrix contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not self.sensor_ids:
            object.__setattr__(self, "sensor_ids", tuple(str(i) for i in range(v.shape[1])))

    @property
    def n_stamps(self) -> int:
        return self.values.shape[0]

    @property
    def n_clients(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Drift:
    """Regime change applied to every stamp after ``at_stamp``."""

    at_stamp: int
    level_shift: float = -0.5        # in units of each client's amplitude
    amplitude_scale: float = 1.5
    phase_shift: float = math.pi / 3


def _profile(theta):
    # two daily dips of unequal depth
    return np.cos(theta) + 0.4 * np.cos(2.0 * theta)


def synthesize(n_clients: int, n_days: int, stamps_per_day: int = 288, noise_std: float = 1.0,
               seed: int = 0, *, amplitude: float = 10.0, free_flow: float = 60.0,
               max_lag_fraction: float = 0.1, drift: Drift | None = None,
               ) -> tuple[SpeedMatrix, np.ndarray]:
    """Periodic synthetic speeds over a random 2-D sensor layout.

    Each client follows the same daily profile with its own level, amplitude
    and phase.  Phases grow linearly along a random flow direction, so nearby
    sensors are nearly in phase and upstream sensors lead downstream ones by
    up to ``max_lag_fraction`` of a day.  Returns the matrix and the Euclidean
    distance matrix of the layout.
    """
    if min(n_clients, n_days, stamps_per_day) < 1 or noise_std < 0:
        raise ValueError("sizes must be positive and noise_std nonnegative")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, (n_clients, 2))
    angle = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.cos(angle), math.sin(angle)])
    progress = coords @ direction
    progress = progress - progress.min()
    span = progress.max() if progress.max() > 0 else 1.0
    phase = 2.0 * math.pi * max_lag_fraction * progress / span
    amp = amplitude * rng.uniform(0.6, 1.4, n_clients)
    level = free_flow + rng.normal(0.0, 0.1 * amplitude, n_clients)

    n_stamps = n_days * stamps_per_day
    t = np.arange(1, n_stamps + 1, dtype=float)[:, None]
    theta = 2.0 * math.pi * t / stamps_per_day - phase
    amp_t = np.broadcast_to(amp, (n_stamps, n_clients)).copy()
    level_t = np.broadcast_to(level, (n_stamps, n_clients)).copy()
    if drift is not None:
        after = t[:, 0] > drift.at_stamp
        theta[after] -= drift.phase_shift
        level_t[after] += drift.level_shift * amp
        amp_t[after] *= drift.amplitude_scale
    clean = level_t + amp_t * _profile(theta)
    noise = rng.normal(0.0, 1.0, clean.shape) * noise_std
    distances = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    matrix = SpeedMatrix(clean + noise, period=stamps_per_day, coords=coords)
    return matrix, distances


def load_csv(path: str | Path, *, period: int = 288, stamp_interval_minutes: float = 5.0) -> SpeedMatrix:
    """Read a stamps x sensors CSV with a header row of sensor ids.

    Blank or zero cells count as missing and are filled by carrying the last
    observation forward; a leading gap takes the column's first valid value.
    """
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if len(rows) < 2:
        raise EmptyFileError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise RaggedRowsError(f"{path}: line {i} has {len(row)} fields, expected {len(header)}")
    raw = np.full((len(body), len(header)), np.nan)
    for i, row in enumerate(body):
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell:
                raw[i, j] = float(cell)
    raw[raw == 0] = np.nan
    return SpeedMatrix(impute_locf(raw, header), stamp_interval_minutes, period, tuple(header))


def impute_locf(raw: np.ndarray, names=None) -> np.ndarray:
    out = np.array(raw, dtype=float)
    for j in range(out.shape[1]):
        col = out[:, j]
        valid = np.flatnonzero(~np.isnan(col))
        if valid.size == 0:
            name = names[j] if names is not None else j
            raise AllMissingColumnError(f"column {name!r} has no observations")
        col[:valid[0]] = col[valid[0]]
        idx = np.where(~np.isnan(col), np.arange(col.size), 0)
        np.maximum.accumulate(idx, out=idx)
        out[:, j] = col[idx]
    return out


def write_speed_csv(path: str | Path, matrix: SpeedMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(matrix.sensor_ids)
        for row in matrix.values:
            writer.writerow([f"{v:.6f}" for v in row])


def write_coords_csv(path: str | Path, coords: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "x", "y"])
        for i, (x, y) in enumerate(coords):
            writer.writerow([i, f"{x:.6f}", f"{y:.6f}"])


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float
    fit_stamps: int   # statistics use stamps 1..fit_stamps only

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_normalizer(matrix: SpeedMatrix | np.ndarray, warmup_stamps: int) -> Normalizer:
    """Global z-score statistics from the warmup prefix (population std, floored)."""
    values = matrix.values if isinstance(matrix, SpeedMatrix) else np.asarray(matrix, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if warmup_stamps < 2:
        raise WarmupTooSmallError("normalizer needs at least 2 warmup stamps")
    if warmup_stamps > values.shape[0]:
        raise WarmupTooSmallError("warmup exceeds the available stamps")
    prefix = values[:warmup_stamps]
    return Normalizer(float(prefix.mean()), max(float(prefix.std()), STD_FLOOR), warmup_stamps)


@dataclass(frozen=True)
class SpeedWindow:
    client: int
    stamp: int            # X_T ends here, X_F starts at stamp + 1
    x_hist: np.ndarray    # (T,)
    x_future: np.ndarray  # (F,)


@dataclass(frozen=True)
class WindowSet:
    """All clients' windows for one round."""

    round: int            # 1-based position in the stream
    stamp: int
    x_hist: np.ndarray    # (N, T)
    x_future: np.ndarray  # (N, F)

    @property
    def input_stamps(self) -> range:
        return range(self.stamp - self.x_hist.shape[1] + 1, self.stamp + 1)

    @property
    def target_stamps(self) -> range:
        return range(self.stamp + 1, self.stamp + self.x_future.shape[1] + 1)

    def window(self, client: int) -> SpeedWindow:
        return SpeedWindow(client, self.stamp, self.x_hist[client], self.x_future[client])


def count_windows(n_stamps: int, start_stamp: int, horizon: int) -> int:
    return max(0, n_stamps - start_stamp - horizon + 1)


def window_stream(values, history: int, horizon: int, start_stamp: int | None = None,
                  end_stamp: int | None = None) -> Iterator[WindowSet]:
    """Slide one stamp at a time; round ``k`` ends at stamp ``start_stamp + k - 1``.

    ``values`` is a (stamps, N) array (already normalized if desired) or a
    SpeedMatrix.  Only stamps ``<= end_stamp`` (default: all) are visible.
    """
    if isinstance(values, SpeedMatrix):
        values = values.values
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if start_stamp is None:
        start_stamp = history
    visible = values.shape[0] if end_stamp is None else min(end_stamp, values.shape[0])
    if history < 1 or horizon < 1:
        raise ValueError("history and horizon must be positive")
    if start_stamp < history:
        raise TooShortError(f"start stamp {start_stamp} leaves fewer than {history} history stamps")
    n_rounds = count_windows(visible, start_stamp, horizon)
    if n_rounds < 1:
        raise TooShortError(f"{visible} stamps cannot yield a window ending at {start_stamp} "
                            f"with horizon {horizon}")
    return _iter_windows(values, history, horizon, start_stamp, n_rounds)


def _iter_windows(values, history, horizon, start_stamp, n_rounds):
    for k in range(n_rounds):
        t = start_stamp + k
        yield WindowSet(k + 1, t,
                        values[t - history:t].T.copy(),
                        values[t:t + horizon].T.copy())
