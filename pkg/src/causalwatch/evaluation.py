"""Detection metrics against per-step anomaly labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_anomaly: dict[int, dict] = field(default_factory=dict)
    mean_detection_delay: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_anomaly"] = {str(k): v for k, v in self.per_anomaly.items()}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionMetrics":
        data = dict(data)
        data["per_anomaly"] = {int(k): v for k, v in data.get("per_anomaly", {}).items()}
        return cls(**data)


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def episodes(labels) -> list[tuple[int, int]]:
    """Inclusive ``(start, end)`` index pairs of contiguous positive runs."""
    flags = np.asarray(labels, dtype=bool)
    padded = np.concatenate([[False], flags, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def coalesce(steps: Iterable[int], stride: int = 1) -> list[tuple[int, int]]:
    """Merge alarm steps no more than ``stride`` apart into inclusive intervals."""
    out: list[list[int]] = []
    for s in sorted(set(int(v) for v in steps)):
        if out and s - out[-1][1] <= stride:
            out[-1][1] = s
        else:
            out.append([s, s])
    return [(a, b) for a, b in out]


def _as_intervals(alarms, stride):
    alarms = list(alarms)
    if alarms and all(isinstance(a, (int, np.integer)) for a in alarms):
        return coalesce(alarms, stride)
    return sorted((int(a), int(b)) for a, b in alarms)


def evaluate(alarms: Sequence, labels, *, grace: int = 0, stride: int = 1,
             point_level: bool = False) -> DetectionMetrics:
    """Score alarms against labels.

    ``alarms`` is either a collection of alarm steps or of inclusive
    ``(start, end)`` intervals, both in the label index space. Event level:
    a labeled episode is a true positive when an alarm interval overlaps it
    or the ``grace`` steps after it; each alarm interval touching no episode
    is one false positive. Point level counts individual steps instead.
    """
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        raise ValueError("labels are empty")
    intervals = _as_intervals(alarms, stride)
    for a, b in intervals:
        if a < 0 or b >= labels.size or b < a:
            raise ValueError(f"alarm interval ({a}, {b}) lies outside the labels")
    if point_level:
        predicted = np.zeros_like(labels)
        for a, b in intervals:
            predicted[a:b + 1] = True
        tp = int(np.sum(predicted & labels))
        fp = int(np.sum(predicted & ~labels))
        fn = int(np.sum(~predicted & labels))
        p, r = precision(tp, fp), recall(tp, fn)
        return DetectionMetrics(tp, fp, fn, p, r, f1_score(p, r))

    eps = episodes(labels)
    per, delays = {}, []
    matched = [False] * len(intervals)
    for idx, (s, e) in enumerate(eps):
        hits = [k for k, (a, b) in enumerate(intervals) if a <= e + grace and b >= s]
        for k in hits:
            matched[k] = True
        detected = bool(hits)
        delay = None
        if detected:
            delay = max(0, min(intervals[k][0] for k in hits) - s)
            delays.append(delay)
        per[idx] = {"start": s, "end": e, "detected": detected, "delay": delay,
                    "tp": int(detected), "fn": int(not detected)}
    tp = sum(v["tp"] for v in per.values())
    fn = len(eps) - tp
    fp = matched.count(False)
    p, r = precision(tp, fp), recall(tp, fn)
    return DetectionMetrics(tp, fp, fn, p, r, f1_score(p, r), per,
                            float(np.mean(delays)) if delays else None)


def alarm_intervals(records: Iterable[dict]) -> list[tuple[int, int]]:
    """Source-index intervals of alarm JSON records."""
    out = []
    for rec in records:
        start = int(rec["source_index"])
        out.append((start, int(rec.get("end_source_index", start))))
    return out


def report(metrics: DetectionMetrics, fmt: str = "md") -> str:
    if fmt == "json":
        return json.dumps(metrics.to_dict(), indent=1)
    if fmt != "md":
        raise ValueError("format must be 'md' or 'json'")
    lines = [
        "| metric | value |",
        "|---|---|",
        f"| precision | {100 * metrics.precision:.1f}% |",
        f"| recall | {100 * metrics.recall:.1f}% |",
        f"| F1 | {100 * metrics.f1:.1f}% |",
        f"| TP / FP / FN | {metrics.tp} / {metrics.fp} / {metrics.fn} |",
    ]
    if metrics.mean_detection_delay is not None:
        lines.append(f"| mean detection delay | {metrics.mean_detection_delay:.1f} steps |")
    if metrics.per_anomaly:
        lines += ["", "| episode | span | detected | delay |", "|---|---|---|---|"]
        for k, v in sorted(metrics.per_anomaly.items()):
            delay = "-" if v["delay"] is None else v["delay"]
            lines.append(f"| {k} | {v['start']}-{v['end']} | "
                         f"{'yes' if v['detected'] else 'no'} | {delay} |")
    return "\n".join(lines) + "\n"
