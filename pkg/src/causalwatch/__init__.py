"""Causal-graph based online anomaly detection for multivariate sensor streams."""

__version__ = "0.1.0"

from .dataset import (PreprocessConfig, PreprocessReport, TimeSeriesDataset,
                      load_csv, preprocess)
from .detector import (AnomalyAlarm, StreamState, ThresholdMatrix, calibrate, detect,
                       rank_root_causes)
from .discovery import CausalModel, DiscoveryConfig, LagLink, discover
from .evaluation import DetectionMetrics, evaluate

__all__ = [
    "AnomalyAlarm", "CausalModel", "DetectionMetrics", "DiscoveryConfig", "LagLink",
    "PreprocessConfig", "PreprocessReport", "StreamState", "ThresholdMatrix",
    "TimeSeriesDataset", "calibrate", "detect", "discover", "evaluate", "load_csv",
    "preprocess", "rank_root_causes",
]
