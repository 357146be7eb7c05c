"""Synthetic linear-Gaussian VAR processes, anomaly injection and batch oracles.

Randomness comes from ``numpy.random.Generator(PCG64(seed))``; noise for the
whole horizon (burn-in included) is drawn up front as one
``standard_normal((burn_in + T, N))`` block, so a fixture is fully defined
by its spec, ``T``, ``burn_in`` and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TimeSeriesDataset, apply_report, write_csv
from .discovery import CausalModel, LagLink
from .stats import t_pvalue

GENERATOR = "numpy.random.PCG64"
STABILITY_MARGIN = 0.98
DEFAULT_BURN_IN = 200

ANOMALY_KINDS = ("link-flip", "link-cut", "offset", "stuck", "rewire")


class UnstableProcessError(ValueError):
    pass


@dataclass
class VarProcessSpec:
    """Sparse VAR: ``weights[(src, dst, lag)]`` is the effect of ``x^src_{t-lag}`` on ``x^dst_t``."""

    n_vars: int
    weights: dict[tuple[int, int, int], float]
    noise_std: list[float] | float = 1.0
    seed: int = 0
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.weights = {tuple(int(v) for v in k): float(w)
                        for k, w in self.weights.items()}
        for (i, j, lag) in self.weights:
            if lag < 1:
                raise ValueError("VAR lags must be >= 1")
            if not (0 <= i < self.n_vars and 0 <= j < self.n_vars):
                raise ValueError(f"weight ({i}, {j}, {lag}) references an unknown variable")
        if np.isscalar(self.noise_std):
            self.noise_std = [float(self.noise_std)] * self.n_vars
        self.noise_std = [float(s) for s in self.noise_std]
        if len(self.noise_std) != self.n_vars:
            raise ValueError("noise_std needs one entry per variable")
        if not self.names:
            self.names = [f"X{k + 1}" for k in range(self.n_vars)]

    @property
    def tau_max_true(self) -> int:
        return max((lag for (_, _, lag) in self.weights), default=1)

    def lag_matrices(self, weights=None) -> np.ndarray:
        """``A[tau-1][j, i]`` so that ``x_t = sum_tau A[tau-1] @ x_{t-tau}``."""
        weights = self.weights if weights is None else weights
        A = np.zeros((self.tau_max_true, self.n_vars, self.n_vars))
        for (i, j, lag), w in weights.items():
            A[lag - 1, j, i] = w
        return A

    def spectral_radius(self) -> float:
        A = self.lag_matrices()
        p, n = A.shape[0], self.n_vars
        companion = np.zeros((n * p, n * p))
        companion[:n, :] = np.hstack(list(A))
        companion[n:, :-n] = np.eye(n * (p - 1))
        return float(np.max(np.abs(np.linalg.eigvals(companion))))

    def check_stable(self) -> None:
        rho = self.spectral_radius()
        if rho >= STABILITY_MARGIN:
            raise UnstableProcessError(
                f"companion spectral radius {rho:.4f} >= {STABILITY_MARGIN}")

    def to_dict(self) -> dict:
        return {
            "n_vars": self.n_vars,
            "names": list(self.names),
            "weights": [{"src": i, "dst": j, "lag": lag, "weight": w}
                        for (i, j, lag), w in sorted(self.weights.items())],
            "noise_std": list(self.noise_std),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VarProcessSpec":
        return cls(
            n_vars=int(data["n_vars"]),
            weights={(int(w["src"]), int(w["dst"]), int(w["lag"])): float(w["weight"])
                     for w in data["weights"]},
            noise_std=data.get("noise_std", 1.0),
            seed=int(data.get("seed", 0)),
            names=list(data.get("names", [])),
        )


@dataclass
class AnomalySpec:
    """A mechanism change starting at ``onset``.

    ``target`` is ``(src, dst, lag)`` for link attacks and a variable index
    for ``offset`` and ``stuck``. ``new_src`` is the replacement parent of a
    ``rewire``.
    """

    kind: str
    target: tuple[int, int, int] | int
    onset: int
    magnitude: float = 0.0
    new_src: int | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if isinstance(self.target, (list, tuple)):
            self.target = tuple(int(v) for v in self.target)
        else:
            self.target = int(self.target)

    @property
    def is_link(self) -> bool:
        return self.kind in ("link-flip", "link-cut", "rewire")

    @property
    def attacked_variable(self) -> int:
        return self.target[0] if self.is_link else self.target

    def to_dict(self) -> dict:
        target = ({"src": self.target[0], "dst": self.target[1], "lag": self.target[2]}
                  if self.is_link else {"var": self.target})
        out = {"kind": self.kind, "target": target, "onset": self.onset,
               "magnitude": self.magnitude}
        if self.new_src is not None:
            out["new_src"] = self.new_src
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AnomalySpec":
        t = data["target"]
        if isinstance(t, dict):
            target = (t["src"], t["dst"], t["lag"]) if "src" in t else t["var"]
        else:
            target = t
        return cls(data["kind"], target, int(data["onset"]),
                   float(data.get("magnitude", 0.0)), data.get("new_src"))


@dataclass
class LabeledStream:
    dataset: TimeSeriesDataset
    labels: np.ndarray
    spec: AnomalySpec

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.shape != (self.dataset.T,):
            raise ValueError("labels must have one flag per row")


def _noise(spec: VarProcessSpec, T: int, burn_in: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((burn_in + T, spec.n_vars)) * np.asarray(spec.noise_std)


def _simulate(A: np.ndarray, eps: np.ndarray, x: np.ndarray, start: int,
              stop: int | None = None, offset=None, stuck=None) -> None:
    p = A.shape[0]
    for t in range(start, x.shape[0] if stop is None else stop):
        acc = eps[t].copy()
        for tau in range(1, min(p, t) + 1):
            acc += A[tau - 1] @ x[t - tau]
        if offset is not None:
            acc[offset[0]] += offset[1]
        if stuck is not None:
            acc[stuck[0]] = stuck[1]
        x[t] = acc


def generate_var(spec: VarProcessSpec, T: int, seed: int | None = None,
                 burn_in: int = DEFAULT_BURN_IN) -> TimeSeriesDataset:
    """Simulate ``T`` steps after discarding ``burn_in`` start-up steps."""
    spec.check_stable()
    if T <= 10 * spec.tau_max_true:
        raise ValueError(f"T={T} must exceed 10 * tau_max_true")
    burn_in = max(burn_in, spec.tau_max_true)
    seed = spec.seed if seed is None else seed
    eps = _noise(spec, T, burn_in, seed)
    x = np.zeros_like(eps)
    _simulate(spec.lag_matrices(), eps, x, 0)
    return TimeSeriesDataset(x[burn_in:], list(spec.names))


def inject_anomaly(stream: TimeSeriesDataset, process: VarProcessSpec,
                   anomaly: AnomalySpec, seed: int | None = None,
                   burn_in: int = DEFAULT_BURN_IN) -> LabeledStream:
    """Regenerate ``stream`` from ``anomaly.onset`` with the modified mechanism.

    ``stream`` must come from ``generate_var(process, T, seed, burn_in)`` so
    the post-onset noise matches; everything before the onset is copied.
    """
    T = stream.T
    if not 0 <= anomaly.onset < T:
        raise ValueError("onset must lie inside the stream")
    weights = dict(process.weights)
    offset = stuck = None
    if anomaly.is_link:
        if anomaly.target not in weights:
            raise ValueError(f"link {anomaly.target} is not part of the process")
        if anomaly.kind == "link-flip":
            weights[anomaly.target] = -weights[anomaly.target]
        elif anomaly.kind == "link-cut":
            weights[anomaly.target] = 0.0
        else:
            src, dst, lag = anomaly.target
            new_src = anomaly.new_src
            if new_src is None or not 0 <= new_src < process.n_vars:
                raise ValueError("rewire needs a valid new_src")
            w = weights.pop(anomaly.target)
            weights[(new_src, dst, lag)] = weights.get((new_src, dst, lag), 0.0) + w
    else:
        if not 0 <= anomaly.target < process.n_vars:
            raise ValueError(f"variable {anomaly.target} is not part of the process")
    burn_in = max(burn_in, process.tau_max_true)
    seed = process.seed if seed is None else seed
    eps = _noise(process, T, burn_in, seed)
    x = np.zeros_like(eps)
    onset = burn_in + anomaly.onset
    _simulate(process.lag_matrices(), eps, x, 0, stop=onset)
    # the history feeding the modified mechanism is the stream itself
    x[burn_in:onset] = stream.values[:anomaly.onset]
    tau_true = max(process.tau_max_true, max((k[2] for k in weights), default=1))
    A = np.zeros((tau_true, process.n_vars, process.n_vars))
    for (i, j, lag), w in weights.items():
        A[lag - 1, j, i] = w
    if anomaly.kind == "offset":
        offset = (anomaly.target, anomaly.magnitude)
    elif anomaly.kind == "stuck":
        frozen = x[onset - 1, anomaly.target]
        stuck = (anomaly.target, frozen)
    _simulate(A, eps, x, onset, offset=offset, stuck=stuck)
    values = x[burn_in:].copy()
    values[:anomaly.onset] = stream.values[:anomaly.onset]
    labels = np.zeros(T, dtype=bool)
    labels[anomaly.onset:] = True
    ds = TimeSeriesDataset(values, list(stream.names), stream.dt, stream.origin_index)
    return LabeledStream(ds, labels, anomaly)


def true_links(spec: VarProcessSpec) -> set[tuple[int, int, int]]:
    return {k for k, w in spec.weights.items() if w != 0}


def toy_var(seed: int = 42) -> VarProcessSpec:
    """Three-variable VAR(2): X1 -> X1 (lag 1, 0.7), X1 -> X2 (lag 1, 0.8), X2 -> X3 (lag 2, 0.6)."""
    return VarProcessSpec(3, {(0, 0, 1): 0.7, (0, 1, 1): 0.8, (1, 2, 2): 0.6},
                          noise_std=1.0, seed=seed)


def oracle_full_ci(ds, tau_max: int, alpha: float) -> list[LagLink]:
    """Test every lagged pair given all other lagged variables up to ``tau_max``.

    One ordinary least-squares fit (with intercept) per target over the full
    lagged design; each coefficient's t statistic converts to the partial
    correlation ``t / sqrt(t^2 + dof)``. This is independent of the
    residualization kernel. A target the design reproduces exactly gets
    ``r = sign(beta)``, ``p = 0`` on its nonzero weights.
    """
    values = ds.values if isinstance(ds, TimeSeriesDataset) else np.asarray(ds, float)
    T, N = values.shape
    n = T - tau_max
    k = N * tau_max
    if n <= k + 10:
        raise ValueError("full conditioning is ill-posed for this T, N and tau_max")
    lagged = np.column_stack([values[tau_max - tau:T - tau, i]
                              for i in range(N) for tau in range(1, tau_max + 1)])
    X = np.column_stack([np.ones(n), lagged])
    gram = X.T @ X
    if np.linalg.matrix_rank(gram) < k + 1:
        raise ValueError("the lagged design is singular; full conditioning is undefined")
    inv = np.linalg.inv(gram)
    dof = n - (k - 1) - 2  # every other lagged column is conditioned on
    links = []
    for j in range(N):
        y = values[tau_max:, j]
        beta = inv @ (X.T @ y)
        rss = float(np.sum((y - X @ beta) ** 2))
        tss = float(np.sum((y - y.mean()) ** 2))
        exact = rss <= 1e-20 * tss
        scale = np.max(np.abs(beta[1:]))
        for col in range(k):
            b = float(beta[col + 1])
            if exact:
                r = float(np.sign(b)) if abs(b) > 1e-8 * scale else 0.0
                p = 0.0 if r else 1.0
            else:
                t = b / np.sqrt(rss / dof * inv[col + 1, col + 1])
                r = float(t / np.sqrt(t * t + dof))
                p = t_pvalue(r, dof)
            if p <= alpha:
                i, tau = divmod(col, tau_max)
                links.append(LagLink(i, j, tau + 1, 0.0, p, r))
    return links


def oracle_replay(stream, model: CausalModel, thresholds, window: int | None = None):
    """Batch recomputation of the online coefficients at every checkpoint.

    Each checkpoint refits every target from scratch on the preprocessed
    prefix (or trailing window). Returns ``(table, alarms)`` where ``table``
    maps the subsampled step to ``{link key: coefficient}`` and ``alarms``
    maps each violating step to its sorted broken link keys.
    """
    ds = stream.dataset if isinstance(stream, LabeledStream) else stream
    report = model.preprocess
    data = apply_report(ds, report).values
    tau_max = model.tau_max
    parents = model.parents
    warmup = tau_max + max((len(p) for p in parents.values()), default=0) + 5
    thr = thresholds.thresholds if hasattr(thresholds, "thresholds") else thresholds
    table, alarms = {}, {}
    for m in range(warmup, data.shape[0] + 1):
        start = tau_max if window is None else max(tau_max, m - window)
        coeffs = {}
        for j, plist in parents.items():
            y = data[start:m, j]
            X = np.column_stack([data[start - tau:m - tau, i] for i, tau in plist])
            beta = np.linalg.lstsq(X, y, rcond=None)[0]
            for (i, tau), b in zip(plist, beta):
                coeffs[(i, j, tau)] = float(b)
        step = m - 1
        table[step] = coeffs
        broken = sorted(key for key, c in coeffs.items()
                        if abs(c - model.link(*key).coeff) > thr[key])
        if broken:
            alarms[step] = broken
    return table, alarms


def write_fixture(directory, process: VarProcessSpec, normal: TimeSeriesDataset,
                  seed: int, labeled: LabeledStream | None = None, prefix: str = "var",
                  T: int | None = None, burn_in: int = DEFAULT_BURN_IN) -> dict[str, Path]:
    """Write spec JSON, normal CSV and (with an attack) attacked CSV + labels CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{prefix}_seed{seed}"
    meta = {"process": process.to_dict(), "seed": seed, "T": T or normal.T,
            "burn_in": burn_in, "generator": GENERATOR}
    if labeled is not None:
        meta["attack"] = labeled.spec.to_dict()
    paths = {"spec": directory / f"{stem}_spec.json",
             "normal": directory / f"{stem}_normal.csv"}
    paths["spec"].write_text(json.dumps(meta, indent=1))
    write_csv(normal, paths["normal"])
    if labeled is not None:
        paths["attack"] = directory / f"{stem}_attack.csv"
        paths["labels"] = directory / f"{stem}_labels.csv"
        write_csv(labeled.dataset, paths["attack"])
        with paths["labels"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"])
            w.writerows([[int(v)] for v in labeled.labels])
    return paths


def random_var(n_vars: int, seed: int, *, n_drivers: int | None = None,
               coupled_noise: float = 0.05, max_lag: int = 2) -> VarProcessSpec:
    """Random plant-like process: autoregressive drivers feeding a tree of coupled sensors.

    Drivers follow AR(1) with weight in [0.6, 0.9] and unit noise. Every other
    variable has one parent among the variables before it, with weight
    magnitude in [0.6, 1.0], random sign, lag in ``[1, max_lag]`` and noise
    ``coupled_noise``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if n_drivers is None:
        n_drivers = 1 if n_vars <= 3 else 2
    n_drivers = max(1, min(n_drivers, n_vars))
    weights = {}
    for d in range(n_drivers):
        weights[(d, d, 1)] = float(rng.uniform(0.6, 0.9))
    for j in range(n_drivers, n_vars):
        i = int(rng.integers(0, j))
        lag = int(rng.integers(1, max_lag + 1))
        weights[(i, j, lag)] = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0))
    noise = [1.0] * n_drivers + [coupled_noise] * (n_vars - n_drivers)
    return VarProcessSpec(n_vars, weights, noise, seed)
