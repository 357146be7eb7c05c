"""HTTP front end: learn models, calibrate thresholds, monitor live streams."""

import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..dataset import DatasetError, PreprocessConfig, TimeSeriesDataset
from ..detector import (DetectorError, StreamState, StreamStopped, ThresholdMatrix,
                        calibrate, link_label)
from ..discovery import CausalModel, DiscoveryConfig, discover
from ..evaluation import alarm_intervals, evaluate
from .schemas import (CalibrateRequest, DatasetIn, EvalRequest, LearnRequest,
                      MessageResponse, ModelOut, SamplesIn, SamplesOut, StreamCreate,
                      StreamOut, ThresholdsIn, ThresholdsOut)


class Registry:
    """In-memory models, thresholds and streams; one lock per stream."""

    def __init__(self):
        self.models: dict[str, CausalModel] = {}
        self.thresholds: dict[str, ThresholdMatrix] = {}
        self.streams: dict[str, tuple[str, StreamState, threading.Lock]] = {}
        self.lock = threading.Lock()

    def model(self, model_id):
        try:
            return self.models[model_id]
        except KeyError:
            raise HTTPException(404, f"unknown model {model_id}") from None

    def stream(self, stream_id):
        try:
            return self.streams[stream_id]
        except KeyError:
            raise HTTPException(404, f"unknown stream {stream_id}") from None


def _dataset(data: DatasetIn) -> TimeSeriesDataset:
    try:
        return TimeSeriesDataset(np.asarray(data.values, dtype=float), data.names, data.dt)
    except (DatasetError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from None


def _stream_out(stream_id, model_id, state: StreamState) -> StreamOut:
    return StreamOut(
        stream_id=stream_id, model_id=model_id, t=state.t,
        checkpoints=state.n_checkpoints, stopped=state.stopped,
        coeffs={link_label(state.model, k): v for k, v in state.coeffs.items()},
        alarms=[a.to_dict(state.model) for a in state.alarms])


def create_app(registry: Registry | None = None) -> FastAPI:
    reg = registry or Registry()
    app = FastAPI(title="causalwatch", version=__version__)
    app.state.registry = reg

    @app.get("/", response_model=MessageResponse)
    def root():
        return MessageResponse(message="ready")

    @app.get("/version")
    def version():
        return {"version": __version__}

    @app.post("/models", response_model=ModelOut)
    def learn(req: LearnRequest):
        ds = _dataset(req.data)
        try:
            model = discover(ds, PreprocessConfig(**req.preprocess.model_dump()),
                             DiscoveryConfig(**req.discovery.model_dump()))
        except (DatasetError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from None
        model_id = uuid.uuid4().hex[:12]
        with reg.lock:
            reg.models[model_id] = model
        return ModelOut(model_id=model_id, model=model.to_dict())

    @app.post("/models/import", response_model=ModelOut)
    def import_model(body: dict):
        try:
            model = CausalModel.from_dict(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, f"malformed model: {exc}") from None
        model_id = uuid.uuid4().hex[:12]
        with reg.lock:
            reg.models[model_id] = model
        return ModelOut(model_id=model_id, model=model.to_dict())

    @app.get("/models/{model_id}", response_model=ModelOut)
    def get_model(model_id: str):
        return ModelOut(model_id=model_id, model=reg.model(model_id).to_dict())

    @app.get("/models/{model_id}/dot")
    def get_dot(model_id: str):
        return {"dot": reg.model(model_id).to_dot()}

    @app.post("/models/{model_id}/calibrate", response_model=ThresholdsOut)
    def calibrate_model(model_id: str, req: CalibrateRequest):
        model = reg.model(model_id)
        try:
            thr = calibrate(_dataset(req.data), model, window=req.window)
        except (DetectorError, DatasetError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from None
        with reg.lock:
            reg.thresholds[model_id] = thr
        return ThresholdsOut(model_id=model_id, thresholds=thr.to_dict(model))

    @app.put("/models/{model_id}/thresholds", response_model=ThresholdsOut)
    def put_thresholds(model_id: str, req: ThresholdsIn):
        model = reg.model(model_id)
        try:
            thr = ThresholdMatrix.from_dict(req.thresholds, model)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        with reg.lock:
            reg.thresholds[model_id] = thr
        return ThresholdsOut(model_id=model_id, thresholds=thr.to_dict(model))

    @app.post("/streams", response_model=StreamOut)
    def open_stream(req: StreamCreate):
        model = reg.model(req.model_id)
        thr = reg.thresholds.get(req.model_id)
        if thr is None:
            raise HTTPException(409, "model has no thresholds; calibrate first")
        try:
            state = StreamState(model, thr, window=req.window,
                                stop_on_first=req.stop_on_first, side=req.side)
        except (DetectorError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from None
        stream_id = uuid.uuid4().hex[:12]
        with reg.lock:
            reg.streams[stream_id] = (req.model_id, state, threading.Lock())
        return _stream_out(stream_id, req.model_id, state)

    @app.get("/streams/{stream_id}", response_model=StreamOut)
    def get_stream(stream_id: str):
        model_id, state, _ = reg.stream(stream_id)
        return _stream_out(stream_id, model_id, state)

    @app.post("/streams/{stream_id}/samples", response_model=SamplesOut)
    def push_samples(stream_id: str, req: SamplesIn):
        _, state, lock = reg.stream(stream_id)
        alarms = []
        with lock:
            for k, row in enumerate(req.rows):
                src = None if req.source_index is None else req.source_index + k
                try:
                    alarm = state.push_sample(row, src)
                except StreamStopped as exc:
                    raise HTTPException(409, str(exc)) from None
                except DetectorError as exc:
                    raise HTTPException(422, str(exc)) from None
                if alarm is not None:
                    alarms.append(alarm.to_dict(state.model))
                if state.stopped:
                    break
        return SamplesOut(t=state.t, stopped=state.stopped, alarms=alarms)

    @app.post("/streams/{stream_id}/close", response_model=SamplesOut)
    def close_stream(stream_id: str):
        _, state, lock = reg.stream(stream_id)
        with lock:
            alarm = state.finish()
        with reg.lock:
            reg.streams.pop(stream_id, None)
        return SamplesOut(t=state.t, stopped=state.stopped,
                          alarms=[] if alarm is None else [alarm.to_dict(state.model)])

    @app.post("/eval")
    def eval_alarms(req: EvalRequest):
        try:
            metrics = evaluate(alarm_intervals(req.alarms), req.labels,
                               grace=req.grace, point_level=req.point_level)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        return metrics.to_dict()

    return app


app = create_app()
