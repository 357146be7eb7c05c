"""Lagged causal graph discovery (PC condition selection + MCI) and link fitting."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import stats
from .dataset import (PreprocessConfig, PreprocessReport, TimeSeriesDataset,
                      preprocess)

logger = logging.getLogger(__name__)

Parent = tuple[int, int]  # (source variable index, lag)


@dataclass(frozen=True)
class LagLink:
    src: int
    dst: int
    lag: int
    coeff: float = 0.0
    pvalue: float = 0.0
    mci: float = 0.0

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be >= 1 (no contemporaneous links)")
        if not 0.0 <= self.pvalue <= 1.0:
            raise ValueError("pvalue must lie in [0, 1]")

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.src, self.dst, self.lag)


@dataclass
class DiscoveryConfig:
    alpha: float = 0.05
    pc_alpha: float | None = None
    max_conds_dim: int | None = None
    max_parents: int | None = None
    prune: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.pc_alpha is None:
            self.pc_alpha = self.alpha
        if not 0 < self.pc_alpha < 1:
            raise ValueError("pc_alpha must lie in (0, 1)")


def _parent_order(links):
    return sorted(links, key=lambda l: (-abs(l.mci), l.src, l.lag))


@dataclass
class CausalModel:
    """Normal causal model: lagged links with their regression weights."""

    names: list[str]
    tau_max: int
    links: list[LagLink] = field(default_factory=list)
    preprocess: PreprocessReport | None = None

    def __post_init__(self):
        for link in self.links:
            if link.lag > self.tau_max:
                raise ValueError(f"link {link.key} exceeds tau_max={self.tau_max}")
            if not (0 <= link.src < self.n_vars and 0 <= link.dst < self.n_vars):
                raise ValueError(f"link {link.key} references an unknown variable")
        self.links = sorted(self.links, key=lambda l: l.key)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def parents(self) -> dict[int, list[Parent]]:
        """Target index -> parents ordered by |mci| descending, ties by (src, lag)."""
        out: dict[int, list[Parent]] = {}
        for j in range(self.n_vars):
            mine = [l for l in self.links if l.dst == j]
            if mine:
                out[j] = [(l.src, l.lag) for l in _parent_order(mine)]
        return out

    def link(self, src: int, dst: int, lag: int) -> LagLink:
        for l in self.links:
            if l.key == (src, dst, lag):
                return l
        raise KeyError((src, dst, lag))

    def coefficient_tensor(self) -> np.ndarray:
        """Dense ``N x N x tau_max`` tensor, entry ``[i, j, tau-1]``."""
        c = np.zeros((self.n_vars, self.n_vars, self.tau_max))
        for l in self.links:
            c[l.src, l.dst, l.lag - 1] = l.coeff
        return c

    def variables_in_model(self) -> list[str]:
        used = {l.src for l in self.links} | {l.dst for l in self.links}
        return [self.names[k] for k in sorted(used)]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "tau_max": self.tau_max,
            "preprocess": self.preprocess.to_dict() if self.preprocess else None,
            "links": [{"src": l.src, "dst": l.dst, "lag": l.lag,
                       "coeff": l.coeff, "pvalue": l.pvalue, "mci": l.mci}
                      for l in self.links],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CausalModel":
        pre = data.get("preprocess")
        return cls(
            names=list(data["names"]),
            tau_max=int(data["tau_max"]),
            links=[LagLink(int(d["src"]), int(d["dst"]), int(d["lag"]),
                           float(d["coeff"]), float(d.get("pvalue", 0.0)),
                           float(d.get("mci", 0.0)))
                   for d in data["links"]],
            preprocess=PreprocessReport.from_dict(pre) if pre else None,
        )

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips every double exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CausalModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dot(self) -> str:
        """Graphviz source of the variable-level graph (lags collapsed)."""
        edges: dict[tuple[int, int], float] = {}
        for l in self.links:
            key = (l.src, l.dst)
            edges[key] = max(edges.get(key, 0.0), abs(l.coeff))
        lines = ["digraph causal_model {"]
        for k in sorted({a for e in edges for a in e}):
            lines.append(f'  "{self.names[k]}";')
        for (i, j), w in sorted(edges.items()):
            lines.append(f'  "{self.names[i]}" -> "{self.names[j]}" [weight={w:.3f}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


class _LaggedData:
    """Column access to ``x^i_{t - tau}`` for ``t`` in ``[start, T)``."""

    def __init__(self, values: np.ndarray, start: int):
        self.values = values
        self.start = start
        self.T = values.shape[0]
        if self.T - start < 3:
            raise stats.InsufficientSamplesError(
                f"{self.T} samples leave no usable rows after a {start}-step lag cut")

    @property
    def n(self) -> int:
        return self.T - self.start

    def col(self, var: int, lag: int) -> np.ndarray:
        return self.values[self.start - lag:self.T - lag, var]

    def cols(self, parents) -> np.ndarray:
        if not parents:
            return np.empty((self.n, 0))
        return np.column_stack([self.col(i, tau) for i, tau in parents])

    def test(self, parent: Parent, target: int, conds) -> stats.CorrelationResult:
        x = self.col(*parent)
        y = self.col(target, 0)
        return stats.partial_correlation(x, y, self.cols(conds) if conds else None)


def _values(ds) -> np.ndarray:
    return ds.values if isinstance(ds, TimeSeriesDataset) else np.asarray(ds, float)


def _effective_max_conds(cfg: DiscoveryConfig, n_rows: int, n_candidates: int) -> int:
    limit = n_candidates - 1 if cfg.max_conds_dim is None else cfg.max_conds_dim
    feasible = n_rows - 3
    if limit > feasible:
        warnings.warn(f"max_conds_dim reduced from {limit} to {feasible}: "
                      "too few samples", RuntimeWarning, stacklevel=3)
        limit = feasible
    return max(limit, 0)


def pc_target(data: _LaggedData, j: int, tau_max: int, n_vars: int,
              cfg: DiscoveryConfig) -> list[tuple[Parent, float]]:
    """Condition selection for one target.

    At iteration ``p`` every remaining candidate is tested against the ``p``
    strongest other candidates; non-significant ones are removed after the
    sweep, and the survivors are re-sorted by their weakest observed
    dependence. Stops once ``p`` exceeds the number of other candidates.
    """
    parents: list[Parent] = [(i, tau) for i in range(n_vars)
                             for tau in range(1, tau_max + 1)]
    strength = {p: np.inf for p in parents}
    max_dim = _effective_max_conds(cfg, data.n, len(parents))
    for dim in range(max_dim + 1):
        if len(parents) - 1 < dim:
            break
        nonsig = []
        for parent in parents:
            conds = [q for q in parents if q != parent][:dim]
            res = data.test(parent, j, conds)
            strength[parent] = min(strength[parent], abs(res.r))
            if res.pvalue > cfg.pc_alpha:
                nonsig.append(parent)
        for parent in nonsig:
            del strength[parent]
        parents = sorted(strength, key=lambda p: (-strength[p], p))
    if cfg.max_parents is not None:
        parents = parents[:cfg.max_parents]
    return [(p, stats.cmi_gaussian(min(strength[p], 1 - 1e-16))) for p in parents]


def pc_stage(ds, tau_max: int, cfg: DiscoveryConfig | None = None
             ) -> dict[int, list[tuple[Parent, float]]]:
    """Candidate parents per target, each with its CMI score, strongest first."""
    cfg = cfg or DiscoveryConfig()
    values = _values(ds)
    n_vars = values.shape[1]
    if values.shape[0] <= tau_max + 10:
        raise stats.InsufficientSamplesError(
            f"T={values.shape[0]} is too short for tau_max={tau_max}")
    data = _LaggedData(values, 2 * tau_max)
    return {j: pc_target(data, j, tau_max, n_vars, cfg) for j in range(n_vars)}


def mci_stage(ds, candidates: dict[int, list], tau_max: int,
              cfg: DiscoveryConfig | None = None) -> list[LagLink]:
    """Momentary conditional independence test of every PC candidate.

    A candidate ``(i, tau) -> j`` is tested given the other candidates of
    ``j`` and the candidates of ``i`` shifted by ``tau``.
    """
    cfg = cfg or DiscoveryConfig()
    values = _values(ds)
    data = _LaggedData(values, 2 * tau_max)
    # accepts pc_stage output or plain (src, lag) lists
    parents = {j: [tuple(p[0]) if isinstance(p[0], tuple) else tuple(p)
                   for p in cands] for j, cands in candidates.items()}
    links = []
    for j in sorted(parents):
        for (i, tau) in parents[j]:
            conds = [q for q in parents[j] if q != (i, tau)]
            for (k, lag) in parents.get(i, []):
                shifted = (k, lag + tau)
                if shifted not in conds:
                    conds.append(shifted)
            res = data.test((i, tau), j, conds)
            if res.pvalue <= cfg.alpha:
                links.append(LagLink(i, j, tau, 0.0, res.pvalue, res.r))
    return links


def _fit_target(values: np.ndarray, j: int, parents: list[Parent], tau_max: int
                ) -> np.ndarray:
    data = _LaggedData(values, tau_max)
    return stats.fit_or_ridge(data.col(j, 0), data.cols(parents)).coefficients


def fit_coefficients(ds, links, tau_max: int, names=None,
                     report: PreprocessReport | None = None) -> CausalModel:
    """Joint least-squares weights of each target on all of its lagged parents.

    Rows ``t >= tau_max`` are used, with no intercept, so the weights are
    exactly what the online detector re-estimates.
    """
    values = _values(ds)
    if names is None:
        names = ds.names if isinstance(ds, TimeSeriesDataset) else [
            f"X{k}" for k in range(values.shape[1])]
    by_dst: dict[int, list[LagLink]] = {}
    for l in links:
        if l.lag > tau_max:
            raise ValueError(f"link {l.key} exceeds tau_max={tau_max}")
        by_dst.setdefault(l.dst, []).append(l)
    fitted = []
    for j, mine in sorted(by_dst.items()):
        mine = _parent_order(mine)
        coef = _fit_target(values, j, [(l.src, l.lag) for l in mine], tau_max)
        fitted += [replace(l, coeff=float(c)) for l, c in zip(mine, coef)]
    return CausalModel(list(names), tau_max, fitted, report)


def prune_below_mean(model: CausalModel) -> CausalModel:
    """Drop links whose |coeff| is strictly below the mean |coeff| of all links."""
    if not model.links:
        logger.warning("model has no links to prune")
        return model
    n = len(model.links)
    total = math.fsum(abs(l.coeff) for l in model.links)
    # |c| < total / n without the rounding of the division; equal weights all survive
    kept = [l for l in model.links if not abs(l.coeff) * n < total]
    if not kept:
        logger.warning("pruning removed every link")
    return CausalModel(list(model.names), model.tau_max, kept, model.preprocess)


def pcmci(ds, tau_max: int, cfg: DiscoveryConfig | None = None) -> list[LagLink]:
    cfg = cfg or DiscoveryConfig()
    return mci_stage(ds, pc_stage(ds, tau_max, cfg), tau_max, cfg)


def discover(ds_normal: TimeSeriesDataset, pcfg: PreprocessConfig | None = None,
             dcfg: DiscoveryConfig | None = None) -> CausalModel:
    """Preprocess, run PCMCI, fit link weights, prune weak links and refit."""
    pcfg = pcfg or PreprocessConfig()
    dcfg = dcfg or DiscoveryConfig()
    data, report = preprocess(ds_normal, pcfg)
    links = pcmci(data, report.tau_max, dcfg)
    model = fit_coefficients(data, links, report.tau_max, data.names, report)
    if dcfg.prune:
        pruned = prune_below_mean(model)
        # survivors are refit jointly so online re-estimates share their scale
        model = fit_coefficients(data, pruned.links, report.tau_max, data.names, report)
    logger.info("discovered %d links over %d variables", len(model.links),
                len(model.variables_in_model()))
    return model
