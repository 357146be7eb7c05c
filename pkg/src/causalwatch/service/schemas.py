from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class DatasetIn(BaseModel):
    names: List[str]
    values: List[List[float]]
    dt: float = 1.0


class PreprocessIn(BaseModel):
    constant_ratio: float = 0.01
    nyquist_multiplier: float = 5.0
    tau_cap: int = 20
    standardize: bool = True
    literal_constant_test: bool = False
    t_s: Optional[int] = None
    tau_max: Optional[int] = None


class DiscoveryIn(BaseModel):
    alpha: float = 0.05
    pc_alpha: Optional[float] = None
    max_conds_dim: Optional[int] = None
    max_parents: Optional[int] = None
    prune: bool = True


class LearnRequest(BaseModel):
    data: DatasetIn
    preprocess: PreprocessIn = Field(default_factory=PreprocessIn)
    discovery: DiscoveryIn = Field(default_factory=DiscoveryIn)


class ModelOut(BaseModel):
    model_id: str
    model: Dict[str, Any]


class CalibrateRequest(BaseModel):
    data: DatasetIn
    window: Optional[int] = None


class ThresholdsIn(BaseModel):
    thresholds: Dict[str, Any]


class ThresholdsOut(BaseModel):
    model_id: str
    thresholds: Dict[str, Any]


class StreamCreate(BaseModel):
    model_id: str
    stop_on_first: bool = False
    window: Optional[int] = None
    side: Literal["parent", "child"] = "parent"


class StreamOut(BaseModel):
    stream_id: str
    model_id: str
    t: int
    checkpoints: int
    stopped: bool
    coeffs: Dict[str, float] = Field(default_factory=dict)
    alarms: List[Dict[str, Any]] = Field(default_factory=list)


class SamplesIn(BaseModel):
    rows: List[List[float]]
    source_index: Optional[int] = None


class SamplesOut(BaseModel):
    t: int
    stopped: bool
    alarms: List[Dict[str, Any]]


class EvalRequest(BaseModel):
    alarms: List[Dict[str, Any]]
    labels: List[int]
    grace: int = 0
    point_level: bool = False


class MessageResponse(BaseModel):
    message: str
