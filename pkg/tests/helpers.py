"""Shared builders for the coupled-sensor attack fixtures."""

import numpy as np

from causalwatch import synth
from causalwatch.dataset import PreprocessConfig
from causalwatch.detector import calibrate
from causalwatch.discovery import DiscoveryConfig, discover

T_FIXTURE = 2000
ONSET = 1000
ATTACK_SEED_OFFSET = 10000


def learn(process, seed, T=T_FIXTURE, alpha=0.01):
    normal = synth.generate_var(process, T, seed)
    model = discover(normal, PreprocessConfig(t_s=1, tau_max=3), DiscoveryConfig(alpha=alpha))
    return normal, model


def attack_fixture(seed, kind, n_vars=5, window=None, onset=ONSET, magnitude=3.0):
    """Learned model, thresholds and one attacked stream for ``random_var(n_vars, seed)``.

    Link attacks hit a cross link present in both the process and the model,
    picked with ``default_rng(1000 + seed)``; variable attacks hit that link's source.
    """
    process = synth.random_var(n_vars, seed)
    normal, model = learn(process, seed)
    thresholds = calibrate(normal, model, window=window)
    cross = [l.key for l in model.links if l.src != l.dst and l.key in process.weights]
    if not cross:
        return None
    key = cross[int(np.random.default_rng(1000 + seed).integers(len(cross)))]
    target = key if kind in ("link-flip", "link-cut") else key[0]
    anomaly = synth.AnomalySpec(kind, target, onset, magnitude=magnitude)
    base = synth.generate_var(process, T_FIXTURE, seed + ATTACK_SEED_OFFSET)
    stream = synth.inject_anomaly(base, process, anomaly, seed + ATTACK_SEED_OFFSET)
    return {"process": process, "normal": normal, "model": model,
            "thresholds": thresholds, "key": key, "stream": stream}
