"""Loading and preprocessing of multivariate sensor recordings.

The preprocessing chain mirrors what the detector replays online:
dominant-frequency profile on the raw recording, decimation to a sampling
interval derived from the fastest component, removal of nearly constant
channels, a lag bound derived from the mean period, and standardization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal


class DatasetError(ValueError):
    """Raised for malformed input data or an impossible preprocessing request."""


@dataclass
class TimeSeriesDataset:
    """A ``T x N`` observation matrix with variable names.

    ``dt`` is the sampling interval in seconds and ``origin_index`` the row
    offset of the first observation inside the source recording.
    """

    values: np.ndarray
    names: list[str]
    dt: float = 1.0
    origin_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DatasetError("values must be a 2-D matrix (T x N)")
        self.values = values
        self.names = [str(n) for n in self.names]
        if len(self.names) != values.shape[1]:
            raise DatasetError(
                f"{len(self.names)} names given for {values.shape[1]} columns")
        seen = set()
        for name in self.names:
            if name in seen:
                raise DatasetError(f"duplicate variable name {name!r}")
            seen.add(name)
        if values.shape[0] < 2:
            raise DatasetError("a dataset needs at least 2 rows")
        if not np.all(np.isfinite(values)):
            raise DatasetError("dataset contains missing or non-finite values")
        if not self.dt > 0:
            raise DatasetError("dt must be positive")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> "TimeSeriesDataset":
        try:
            idx = [self.names.index(n) for n in names]
        except ValueError as exc:
            raise DatasetError(f"unknown variable: {exc}") from None
        return TimeSeriesDataset(self.values[:, idx], list(names), self.dt,
                                 self.origin_index)


@dataclass
class SpectralProfile:
    names: list[str]
    dominant_freq: np.ndarray
    power: np.ndarray
    dt: float = 1.0

    def restrict(self, names: Sequence[str]) -> "SpectralProfile":
        idx = [self.names.index(n) for n in names]
        return SpectralProfile(list(names), self.dominant_freq[idx],
                               self.power[idx], self.dt)


@dataclass
class PreprocessConfig:
    """Knobs of the preprocessing chain.

    ``t_s`` and ``tau_max`` override the spectral heuristics when set.
    ``literal_constant_test`` switches the near-constant filter to the
    ``mean < ratio * std`` form.
    """

    constant_ratio: float = 0.01
    nyquist_multiplier: float = 5.0
    tau_cap: int = 20
    standardize: bool = True
    literal_constant_test: bool = False
    pooling: str = "decimate"
    t_s: int | None = None
    tau_max: int | None = None

    def __post_init__(self):
        if not self.constant_ratio > 0:
            raise ValueError("constant_ratio must be > 0")
        if self.nyquist_multiplier < 1:
            raise ValueError("nyquist_multiplier must be >= 1")
        if self.tau_cap < 1:
            raise ValueError("tau_cap must be >= 1")
        if self.pooling not in ("decimate", "mean"):
            raise ValueError("pooling must be 'decimate' or 'mean'")
        if self.t_s is not None and self.t_s < 1:
            raise ValueError("t_s must be >= 1")
        if self.tau_max is not None and self.tau_max < 1:
            raise ValueError("tau_max must be >= 1")


@dataclass
class PreprocessReport:
    kept: list[str]
    dropped_constant: list[str]
    t_s: int
    tau_max: int
    scaling: dict[str, tuple[float, float]] = field(default_factory=dict)
    columns: list[str] = field(default_factory=list)
    pooling: str = "decimate"

    def __post_init__(self):
        if not self.columns:
            self.columns = list(self.kept) + list(self.dropped_constant)

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped_constant": list(self.dropped_constant),
            "t_s": int(self.t_s),
            "tau_max": int(self.tau_max),
            "scaling": {k: {"mean": float(m), "std": float(s)}
                        for k, (m, s) in self.scaling.items()},
            "columns": list(self.columns),
            "pooling": self.pooling,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessReport":
        return cls(
            kept=list(data["kept"]),
            dropped_constant=list(data.get("dropped_constant", [])),
            t_s=int(data["t_s"]),
            tau_max=int(data["tau_max"]),
            scaling={k: (float(v["mean"]), float(v["std"]))
                     for k, v in data.get("scaling", {}).items()},
            columns=list(data.get("columns", [])),
            pooling=data.get("pooling", "decimate"),
        )


def _parse_timestamp(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip()).timestamp()
    except ValueError:
        raise DatasetError(f"unparseable timestamp {text!r}") from None


def load_csv(path, timestamp_column: str | None = None,
             fill: str = "reject", columns: Sequence[str] | None = None
             ) -> TimeSeriesDataset:
    """Read a comma-separated file with a header row.

    Empty cells are gaps: ``fill="reject"`` refuses them, ``fill="ffill"``
    carries the previous value forward. When ``timestamp_column`` is given,
    that column sets ``dt`` (median spacing) and is dropped from the values.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return read_csv_rows(csv.reader(fh), timestamp_column=timestamp_column,
                             fill=fill, columns=columns, source=str(path))


def read_csv_rows(reader, timestamp_column=None, fill="reject", columns=None,
                  source="<stream>") -> TimeSeriesDataset:
    if fill not in ("reject", "ffill"):
        raise ValueError("fill must be 'reject' or 'ffill'")
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetError(f"{source}: empty file") from None
    seen = set()
    for h in header:
        if h in seen:
            raise DatasetError(f"{source}: duplicate variable name {h!r}")
        seen.add(h)
    if timestamp_column is not None and timestamp_column not in header:
        raise DatasetError(f"{source}: timestamp column {timestamp_column!r} missing")
    ts_idx = header.index(timestamp_column) if timestamp_column else None
    data_idx = [k for k in range(len(header)) if k != ts_idx]
    names = [header[k] for k in data_idx]

    rows, stamps = [], []
    last = None
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise DatasetError(
                f"{source}: row {lineno} has {len(record)} cells, expected {len(header)}")
        values = []
        for k in data_idx:
            cell = record[k].strip()
            if cell == "":
                if fill == "ffill" and last is not None:
                    values.append(last[len(values)])
                    continue
                raise DatasetError(
                    f"{source}: missing value at row {lineno}, column {header[k]!r}")
            try:
                values.append(float(cell))
            except ValueError:
                raise DatasetError(
                    f"{source}: non-numeric value {cell!r} at row {lineno}, "
                    f"column {header[k]!r}") from None
        if ts_idx is not None:
            stamps.append(_parse_timestamp(record[ts_idx]))
        rows.append(values)
        last = values
    if len(rows) < 2:
        raise DatasetError(f"{source}: fewer than 2 data rows")
    dt = 1.0
    if stamps:
        diffs = np.diff(np.asarray(stamps))
        dt = float(np.median(diffs))
        if not dt > 0:
            raise DatasetError(f"{source}: timestamps are not increasing")
    ds = TimeSeriesDataset(np.asarray(rows, dtype=float), names, dt)
    if columns is not None:
        ds = ds.select(columns)
    return ds


def write_csv(ds: TimeSeriesDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.names)
        for row in ds.values:
            writer.writerow([repr(float(v)) for v in row])


def dominant_frequencies(ds: TimeSeriesDataset) -> SpectralProfile:
    """Per-variable frequency of the largest non-DC periodogram peak.

    Single-sided periodogram with a Hann window. Constant columns report
    frequency 0 and power 0.
    """
    if ds.T < 8:
        raise DatasetError("at least 8 samples are needed for spectral estimation")
    freqs, pxx = signal.periodogram(ds.values, fs=1.0 / ds.dt, window="hann",
                                    detrend="constant", axis=0)
    dom = np.zeros(ds.N)
    power = np.zeros(ds.N)
    for j in range(ds.N):
        if np.ptp(ds.values[:, j]) == 0:
            continue
        k = 1 + int(np.argmax(pxx[1:, j]))
        dom[j] = freqs[k]
        power[j] = pxx[k, j]
    return SpectralProfile(list(ds.names), dom, power, ds.dt)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def choose_sampling(profile: SpectralProfile, cfg: PreprocessConfig) -> int:
    """Subsampling interval, in base steps, at ``nyquist_multiplier`` x Nyquist."""
    positive = profile.dominant_freq[profile.dominant_freq > 0]
    if positive.size == 0:
        raise DatasetError("no variable has a positive dominant frequency")
    seconds = 1.0 / (2.0 * cfg.nyquist_multiplier * positive.max())
    return max(1, _round_half_up(seconds / profile.dt))


def choose_max_lag(profile: SpectralProfile, t_s: int, cfg: PreprocessConfig) -> int:
    positive = profile.dominant_freq[profile.dominant_freq > 0]
    if positive.size == 0:
        raise DatasetError("mean dominant frequency must be positive")
    tau = _round_half_up(1.0 / (t_s * profile.dt * positive.mean()))
    return int(min(max(tau, 1), cfg.tau_cap))


def subsample(ds: TimeSeriesDataset, t_s: int, pooling: str = "decimate"
              ) -> TimeSeriesDataset:
    """Keep every ``t_s``-th row starting at row 0.

    With ``pooling="mean"`` each output row is instead the mean of a full
    block of ``t_s`` rows; a trailing partial block is discarded.
    """
    if t_s < 1:
        raise ValueError("t_s must be >= 1")
    if t_s == 1:
        return TimeSeriesDataset(ds.values.copy(), list(ds.names), ds.dt,
                                 ds.origin_index)
    if pooling == "decimate":
        values = ds.values[::t_s]
    elif pooling == "mean":
        blocks = ds.T // t_s
        values = ds.values[:blocks * t_s].reshape(blocks, t_s, ds.N).mean(axis=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return TimeSeriesDataset(values.copy(), list(ds.names), ds.dt * t_s,
                             ds.origin_index)


def is_near_constant(column: np.ndarray, cfg: PreprocessConfig) -> bool:
    std = column.std()
    mean = column.mean()
    if std == 0:
        return True
    if cfg.literal_constant_test:
        return bool(mean < cfg.constant_ratio * std)
    return bool(std < cfg.constant_ratio * abs(mean))


def drop_near_constant(ds: TimeSeriesDataset, cfg: PreprocessConfig
                       ) -> tuple[TimeSeriesDataset, list[str]]:
    """Remove nearly constant channels; returns the reduced dataset and the dropped names."""
    dropped = [n for j, n in enumerate(ds.names)
               if is_near_constant(ds.values[:, j], cfg)]
    kept = [n for n in ds.names if n not in dropped]
    if not kept:
        raise DatasetError("every variable is (nearly) constant")
    return ds.select(kept), dropped


def standardize(ds: TimeSeriesDataset
                ) -> tuple[TimeSeriesDataset, dict[str, tuple[float, float]]]:
    """Zero mean, unit population std per column."""
    mean = ds.values.mean(axis=0)
    std = ds.values.std(axis=0)
    if np.any(std == 0):
        bad = [n for n, s in zip(ds.names, std) if s == 0]
        raise DatasetError(f"zero-variance columns cannot be standardized: {bad}")
    scaling = {n: (float(m), float(s)) for n, m, s in zip(ds.names, mean, std)}
    return apply_scaling(ds, scaling), scaling


def apply_scaling(ds: TimeSeriesDataset, scaling: dict[str, tuple[float, float]]
                  ) -> TimeSeriesDataset:
    mean = np.array([scaling[n][0] for n in ds.names])
    std = np.array([scaling[n][1] for n in ds.names])
    return TimeSeriesDataset((ds.values - mean) / std, list(ds.names), ds.dt,
                             ds.origin_index)


def unstandardize(ds: TimeSeriesDataset, scaling: dict[str, tuple[float, float]]
                  ) -> TimeSeriesDataset:
    mean = np.array([scaling[n][0] for n in ds.names])
    std = np.array([scaling[n][1] for n in ds.names])
    return TimeSeriesDataset(ds.values * std + mean, list(ds.names), ds.dt,
                             ds.origin_index)


def preprocess(ds: TimeSeriesDataset, cfg: PreprocessConfig | None = None
               ) -> tuple[TimeSeriesDataset, PreprocessReport]:
    """Run the full chain on a normal recording.

    Order: spectral profile on the raw data, subsampling, near-constant
    removal, lag bound over the retained variables, standardization.
    """
    cfg = cfg or PreprocessConfig()
    profile = None
    if cfg.t_s is None or cfg.tau_max is None:
        profile = dominant_frequencies(ds)
    t_s = cfg.t_s if cfg.t_s is not None else choose_sampling(profile, cfg)
    sub = subsample(ds, t_s, cfg.pooling)
    reduced, dropped = drop_near_constant(sub, cfg)
    if cfg.tau_max is not None:
        tau_max = cfg.tau_max
    else:
        tau_max = choose_max_lag(profile.restrict(reduced.names), t_s, cfg)
    if cfg.standardize:
        out, scaling = standardize(reduced)
    else:
        out = reduced
        scaling = {n: (0.0, 1.0) for n in reduced.names}
    report = PreprocessReport(kept=list(reduced.names), dropped_constant=dropped,
                              t_s=t_s, tau_max=tau_max, scaling=scaling,
                              columns=list(ds.names), pooling=cfg.pooling)
    return out, report


def apply_report(ds: TimeSeriesDataset, report: PreprocessReport) -> TimeSeriesDataset:
    """Replay a stored preprocessing on another recording of the same plant."""
    sub = subsample(ds, report.t_s, report.pooling)
    return apply_scaling(sub.select(report.kept), report.scaling)
