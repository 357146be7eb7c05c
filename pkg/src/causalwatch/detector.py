"""Per-link alarm thresholds and online detection of broken causal links.

The detector keeps normal-equation sufficient statistics per target and
re-estimates every model link at each checkpoint (each new subsampled row).
A link is broken when its online weight moves further from the normal
weight than the link's threshold, the root-sum-square of the deviations
seen while replaying the normal recording through the same estimator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import TimeSeriesDataset
from .discovery import CausalModel
from .stats import solve_gram

LinkKey = tuple[int, int, int]


class DetectorError(RuntimeError):
    pass


class StreamStopped(DetectorError):
    """The stream already raised an alarm in stop-on-first mode."""


def link_label(model: CausalModel, key: LinkKey) -> str:
    src, dst, lag = key
    return f"{model.names[src]}:{model.names[dst]}:{lag}"


@dataclass
class ThresholdMatrix:
    thresholds: dict[LinkKey, float]
    horizon: int
    warmup: int
    window: int | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.thresholds.values()):
            raise ValueError("thresholds must be >= 0")

    def to_dict(self, model: CausalModel) -> dict:
        out = {link_label(model, k): v for k, v in sorted(self.thresholds.items())}
        out["_meta"] = {"horizon": self.horizon, "warmup": self.warmup,
                        "window": self.window}
        return out

    @classmethod
    def from_dict(cls, data: Mapping, model: CausalModel) -> "ThresholdMatrix":
        lookup = {link_label(model, l.key): l.key for l in model.links}
        thresholds = {}
        for label, value in data.items():
            if label.startswith("_"):
                continue
            if label not in lookup:
                raise ValueError(f"threshold {label!r} does not match a model link")
            thresholds[lookup[label]] = float(value)
        missing = [link_label(model, l.key) for l in model.links
                   if l.key not in thresholds]
        if missing:
            raise ValueError(f"no threshold for links {missing}")
        meta = data.get("_meta", {})
        return cls(thresholds, int(meta.get("horizon", 0)),
                   int(meta.get("warmup", 0)), meta.get("window"))

    def save(self, path, model: CausalModel) -> None:
        Path(path).write_text(json.dumps(self.to_dict(model), indent=1))

    @classmethod
    def load(cls, path, model: CausalModel) -> "ThresholdMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()), model)


@dataclass
class BrokenLink:
    key: LinkKey
    error: float
    threshold: float


@dataclass
class Checkpoint:
    """Outcome of one online re-estimation."""

    step: int
    source_index: int
    coeffs: dict[LinkKey, float]
    broken: list[BrokenLink]


@dataclass
class AnomalyAlarm:
    step: int
    source_index: int
    broken: list[BrokenLink]
    ranked_roots: list[tuple[int, float]]
    end_step: int | None = None
    end_source_index: int | None = None

    def __post_init__(self):
        if not self.broken:
            raise ValueError("an alarm needs at least one broken link")

    def to_dict(self, model: CausalModel) -> dict:
        out = {
            "step": self.step,
            "source_index": self.source_index,
            "broken": [{"src": model.names[b.key[0]], "dst": model.names[b.key[1]],
                        "lag": b.key[2], "error": b.error, "threshold": b.threshold}
                       for b in self.broken],
            "roots": [{"var": model.names[v], "score": s} for v, s in self.ranked_roots],
        }
        if self.end_step is not None:
            out["end_step"] = self.end_step
            out["end_source_index"] = self.end_source_index
        return out


def _participants(key: LinkKey, side: str) -> int:
    if side == "parent":
        return key[0]
    if side == "child":
        return key[1]
    raise ValueError("side must be 'parent' or 'child'")


def scores_from_squared_errors(model: CausalModel, sq_err: Mapping[LinkKey, float],
                               side: str = "parent") -> list[tuple[int, float]]:
    totals = np.zeros(model.n_vars)
    for key, v in sq_err.items():
        totals[_participants(key, side)] += v
    order = sorted(range(model.n_vars), key=lambda k: (-totals[k], k))
    return [(k, float(math.sqrt(totals[k]))) for k in order]


def rank_root_causes(model: CausalModel, history: Sequence[Mapping[LinkKey, float]],
                     side: str = "parent") -> list[tuple[int, float]]:
    """Score each variable by the 2-norm of coefficient errors over the history.

    ``history`` holds the online coefficients of every checkpoint. With
    ``side="parent"`` a variable collects the errors of links it drives,
    with ``side="child"`` those of links into it.
    """
    if not history:
        raise ValueError("no checkpoint has been evaluated")
    normal = {l.key: l.coeff for l in model.links}
    sq: dict[LinkKey, float] = {}
    for coeffs in history:
        for key, c in coeffs.items():
            sq[key] = sq.get(key, 0.0) + (normal[key] - c) ** 2
    return scores_from_squared_errors(model, sq, side)


def warmup_length(model: CausalModel) -> int:
    """Subsampled rows needed before the first regression."""
    widest = max((len(p) for p in model.parents.values()), default=0)
    return model.tau_max + widest + 5


class _Target:
    __slots__ = ("j", "src", "lag", "keys", "normal", "gram", "xty")

    def __init__(self, j, parents, model):
        self.j = j
        self.src = np.array([p[0] for p in parents], dtype=int)
        self.lag = np.array([p[1] for p in parents], dtype=int)
        self.keys = [(i, j, tau) for i, tau in parents]
        self.normal = np.array([model.link(*k).coeff for k in self.keys])
        p = len(parents)
        self.gram = np.zeros((p, p))
        self.xty = np.zeros(p)


class StreamState:
    """Online buffer and sufficient statistics for one monitored stream.

    Rows are pushed in the column order of the recording the model was
    learned from. Single writer: one thread pushes, others may read
    ``coeffs`` and ``alarms`` between pushes.
    """

    def __init__(self, model: CausalModel, thresholds: ThresholdMatrix | None = None,
                 *, window: int | None = None, stop_on_first: bool = False,
                 side: str = "parent", keep_history: bool = False):
        if model.preprocess is None:
            raise DetectorError("the model carries no preprocessing report")
        if window is not None and window < 1:
            raise ValueError("window must be >= 1")
        self.model = model
        self.thresholds = thresholds
        if thresholds is not None:
            if window is None:
                window = thresholds.window
            elif window != thresholds.window:
                raise ValueError("detection window differs from the calibration window")
        self.window = window
        self.stop_on_first = stop_on_first
        self.side = side
        rep = model.preprocess
        self.t_s = rep.t_s
        self.pooling = rep.pooling
        columns = rep.columns or rep.kept
        self.n_columns = len(columns)
        self._select = np.array([columns.index(n) for n in model.names], dtype=int)
        self._mean = np.array([rep.scaling[n][0] for n in model.names])
        self._std = np.array([rep.scaling[n][1] for n in model.names])
        self._block = np.zeros(len(model.names))
        self._block_count = 0
        self.tau_max = model.tau_max
        self.warmup = warmup_length(model)
        self.targets = [_Target(j, p, model) for j, p in sorted(model.parents.items())]
        self._thr = (None if thresholds is None else
                     {t.j: np.array([thresholds.thresholds[k] for k in t.keys])
                      for t in self.targets})

        self.buffer = np.empty((1024, len(model.names)))
        self.source = np.empty(1024, dtype=np.int64)
        self.m = 0
        self.t = 0
        self.coeffs: dict[LinkKey, float] = {}
        self.sq_err: dict[LinkKey, float] = {k: 0.0 for t in self.targets for k in t.keys}
        self.n_checkpoints = 0
        self.history: list[dict[LinkKey, float]] | None = [] if keep_history else None
        self.alarms: list[AnomalyAlarm] = []
        self.last_checkpoint: Checkpoint | None = None
        self.stopped = False
        self._episode: dict | None = None

    # -- buffering ---------------------------------------------------------

    def _append(self, row: np.ndarray, source_index: int) -> None:
        if self.m == self.buffer.shape[0]:
            self.buffer = np.concatenate([self.buffer, np.empty_like(self.buffer)])
            self.source = np.concatenate([self.source, np.empty_like(self.source)])
        self.buffer[self.m] = (row - self._mean) / self._std
        self.source[self.m] = source_index
        self.m += 1
        r = self.m - 1
        if r >= self.tau_max:
            self._accumulate(r, +1.0)
        if self.window is not None:
            old = r - self.window
            if old >= self.tau_max:
                self._accumulate(old, -1.0)

    def _accumulate(self, r: int, sign: float) -> None:
        buf = self.buffer
        for tg in self.targets:
            z = buf[r - tg.lag, tg.src]
            y = buf[r, tg.j]
            if sign > 0:
                tg.gram += np.outer(z, z)
                tg.xty += z * y
            else:
                tg.gram -= np.outer(z, z)
                tg.xty -= z * y

    def _subsampled(self, row: np.ndarray) -> np.ndarray | None:
        """Return the row that enters the subsampled buffer, if any."""
        t = self.t
        if self.pooling == "decimate":
            return row if t % self.t_s == 0 else None
        self._block += row
        self._block_count += 1
        if self._block_count == self.t_s:
            out = self._block / self.t_s
            self._block = np.zeros_like(self._block)
            self._block_count = 0
            return out
        return None

    # -- estimation --------------------------------------------------------

    def online_coefficients(self) -> dict[LinkKey, float]:
        """Joint least-squares weight of every model link on the current buffer."""
        if self.m < self.warmup:
            raise DetectorError(f"{self.m} rows buffered, warmup needs {self.warmup}")
        out = {}
        for tg in self.targets:
            beta = solve_gram(tg.gram, tg.xty)
            out.update(zip(tg.keys, beta.tolist()))
        return out

    def push(self, row, source_index: int | None = None) -> Checkpoint | None:
        """Append one base-rate row; returns the checkpoint result when one is due."""
        if self.stopped:
            raise StreamStopped("stream stopped after its first alarm")
        row = np.asarray(row, dtype=float)
        if row.shape != (self.n_columns,):
            raise DetectorError(f"expected {self.n_columns} values, got {row.size}")
        if not np.all(np.isfinite(row)):
            raise DetectorError(f"non-finite value in row {self.t}")
        source_index = self.t if source_index is None else source_index
        sub = self._subsampled(row[self._select])
        self.t += 1
        if sub is None:
            return None
        self._append(sub, source_index)
        if self.m < self.warmup:
            return None
        return self._checkpoint()

    def _checkpoint(self) -> Checkpoint:
        coeffs: dict[LinkKey, float] = {}
        broken: list[BrokenLink] = []
        for tg in self.targets:
            beta = solve_gram(tg.gram, tg.xty)
            err = np.abs(beta - tg.normal)
            coeffs.update(zip(tg.keys, beta.tolist()))
            for k, e in zip(tg.keys, err.tolist()):
                self.sq_err[k] += e * e
            if self._thr is not None:
                thr = self._thr[tg.j]
                for idx in np.flatnonzero(err > thr):
                    broken.append(BrokenLink(tg.keys[idx], float(err[idx]),
                                             float(thr[idx])))
        self.coeffs = coeffs
        self.n_checkpoints += 1
        if self.history is not None:
            self.history.append(coeffs)
        broken.sort(key=lambda b: b.key)
        cp = Checkpoint(self.m - 1, int(self.source[self.m - 1]), coeffs, broken)
        self.last_checkpoint = cp
        return cp

    def ranking(self) -> list[tuple[int, float]]:
        if self.n_checkpoints == 0:
            raise ValueError("no checkpoint has been evaluated")
        return scores_from_squared_errors(self.model, self.sq_err, self.side)

    # -- alarms ------------------------------------------------------------

    def push_sample(self, row, source_index: int | None = None) -> AnomalyAlarm | None:
        """Push one row and return an alarm when one is complete.

        Stop-on-first mode returns the alarm at the first violating
        checkpoint and refuses further rows. Continuous mode merges
        consecutive violating checkpoints into one episode, returned at the
        first clean checkpoint after it (or by :meth:`finish`).
        """
        if self.thresholds is None:
            raise DetectorError("detection needs thresholds")
        cp = self.push(row, source_index)
        if cp is None:
            return None
        if cp.broken:
            if self.stop_on_first:
                alarm = AnomalyAlarm(cp.step, cp.source_index, cp.broken, self.ranking())
                self.alarms.append(alarm)
                self.stopped = True
                return alarm
            ep = self._episode
            if ep is None:
                self._episode = {"start": cp, "end": cp,
                                 "broken": {b.key: b for b in cp.broken}}
            else:
                ep["end"] = cp
                for b in cp.broken:
                    if b.key not in ep["broken"] or b.error > ep["broken"][b.key].error:
                        ep["broken"][b.key] = b
            return None
        return self._close_episode()

    def _close_episode(self) -> AnomalyAlarm | None:
        ep = self._episode
        if ep is None:
            return None
        self._episode = None
        broken = [ep["broken"][k] for k in sorted(ep["broken"])]
        alarm = AnomalyAlarm(ep["start"].step, ep["start"].source_index, broken,
                             self.ranking(), ep["end"].step, ep["end"].source_index)
        self.alarms.append(alarm)
        return alarm

    def finish(self) -> AnomalyAlarm | None:
        """Close a pending episode at the end of the stream."""
        return self._close_episode()


def calibrate(ds_normal: TimeSeriesDataset, model: CausalModel,
              window: int | None = None) -> ThresholdMatrix:
    """Per-link thresholds from replaying the normal recording.

    Every checkpoint's deviation from the normal weight enters the
    root-sum-square, so replaying the same recording can never exceed it.
    """
    state = StreamState(model, window=window)
    if ds_normal.N != state.n_columns:
        raise DetectorError(
            f"calibration data has {ds_normal.N} columns, model expects {state.n_columns}")
    for k, row in enumerate(ds_normal.values):
        state.push(row, ds_normal.origin_index + k)
    if state.n_checkpoints == 0:
        raise DetectorError(
            f"calibration horizon ({state.m} subsampled rows) is shorter than the "
            f"warmup ({state.warmup})")
    thresholds = {k: math.sqrt(v) for k, v in state.sq_err.items()}
    return ThresholdMatrix(thresholds, state.m, state.warmup, window)


def detect(rows: Iterable, model: CausalModel, thresholds: ThresholdMatrix,
           *, stop_on_first: bool = False, window: int | None = None,
           side: str = "parent", origin_index: int = 0) -> list[AnomalyAlarm]:
    """Run a whole stream through a fresh :class:`StreamState`."""
    state = StreamState(model, thresholds, window=window, stop_on_first=stop_on_first,
                        side=side)
    for k, row in enumerate(rows):
        state.push_sample(row, origin_index + k)
        if state.stopped:
            break
    state.finish()
    return state.alarms
