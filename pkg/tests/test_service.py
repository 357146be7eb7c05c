import pytest
from fastapi.testclient import TestClient

from causalwatch import __version__
from causalwatch.detector import detect
from causalwatch.service import Registry, create_app
from helpers import attack_fixture


@pytest.fixture(scope="module")
def fx():
    return attack_fixture(0, "link-flip", window=100)


@pytest.fixture
def client():
    return TestClient(create_app(Registry()))


def _data(ds):
    return {"names": ds.names, "values": ds.values.tolist(), "dt": ds.dt}


def test_root_and_version(client):
    assert client.get("/").json() == {"message": "ready"}
    assert client.get("/version").json() == {"version": __version__}


def test_learn_calibrate_stream(client, fx):
    learn = client.post("/models", json={
        "data": _data(fx["normal"]), "preprocess": {"t_s": 1, "tau_max": 3},
        "discovery": {"alpha": 0.01}})
    assert learn.status_code == 200
    model_id = learn.json()["model_id"]
    assert learn.json()["model"] == fx["model"].to_dict()
    assert client.get(f"/models/{model_id}/dot").json()["dot"].startswith("digraph")

    thr = client.post(f"/models/{model_id}/calibrate",
                      json={"data": _data(fx["normal"]), "window": 100})
    assert thr.status_code == 200

    stream = client.post("/streams", json={"model_id": model_id, "window": 100}).json()
    rows = fx["stream"].dataset.values.tolist()
    alarms = []
    for start in range(0, len(rows), 500):
        res = client.post(f"/streams/{stream['stream_id']}/samples",
                          json={"rows": rows[start:start + 500], "source_index": start})
        alarms += res.json()["alarms"]
    alarms += client.post(f"/streams/{stream['stream_id']}/close").json()["alarms"]
    local = detect(fx["stream"].dataset.values, fx["model"], fx["thresholds"])
    assert alarms == [a.to_dict(fx["model"]) for a in local]

    ev = client.post("/eval", json={"alarms": alarms,
                                    "labels": fx["stream"].labels.astype(int).tolist()})
    assert ev.json()["tp"] == 1


def test_stop_on_first(client, fx):
    model_id = client.post("/models/import", json=fx["model"].to_dict()).json()["model_id"]
    client.put(f"/models/{model_id}/thresholds",
               json={"thresholds": fx["thresholds"].to_dict(fx["model"])})
    sid = client.post("/streams", json={"model_id": model_id, "stop_on_first": True}
                      ).json()["stream_id"]
    res = client.post(f"/streams/{sid}/samples",
                      json={"rows": fx["stream"].dataset.values.tolist()}).json()
    assert res["stopped"] and len(res["alarms"]) == 1
    again = client.post(f"/streams/{sid}/samples", json={"rows": [[0.0] * 5]})
    assert again.status_code == 409
    state = client.get(f"/streams/{sid}").json()
    assert state["stopped"] and state["coeffs"]


def test_errors(client, fx):
    assert client.get("/models/nope").status_code == 404
    assert client.get("/streams/nope").status_code == 404
    model_id = client.post("/models/import", json=fx["model"].to_dict()).json()["model_id"]
    assert client.post("/streams", json={"model_id": model_id}).status_code == 409
    assert client.post("/models/import", json={"names": []}).status_code == 422
    assert client.put(f"/models/{model_id}/thresholds",
                      json={"thresholds": {"a:b:1": 1.0}}).status_code == 422
    bad = client.post("/models", json={"data": {"names": ["a"], "values": [[1.0]]}})
    assert bad.status_code == 422
    client.put(f"/models/{model_id}/thresholds",
               json={"thresholds": fx["thresholds"].to_dict(fx["model"])})
    sid = client.post("/streams", json={"model_id": model_id}).json()["stream_id"]
    short = client.post(f"/streams/{sid}/samples", json={"rows": [[1.0, 2.0]]})
    assert short.status_code == 422
