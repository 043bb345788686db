import json
import time
from pathlib import Path

import jsonschema
import pytest
from fastapi.testclient import TestClient

from geoscore.service import ServiceConfig, create_app
from geoscore.store import CountyRow, Store, TaskRecord

SCHEMA = json.loads((Path(__file__).parent.parent / "docs" / "api-schema.json").read_text())
REGION_ALL = {"bbox": [29.9, 113.9, 30.7, 115.0]}
BBOX_ALL = "29.9,113.9,30.7,115.0"


def validate(payload, def_name):
    jsonschema.validate(payload, {**SCHEMA, "$ref": f"#/$defs/{def_name}"})


@pytest.fixture()
def client(small_corpus, tiny_checkpoint, tmp_path):
    config = ServiceConfig(
        store_dir=str(tmp_path / "store"),
        data_dir=str(small_corpus.root),
        default_checkpoint=str(tiny_checkpoint),
        default_workers=1,
    )
    app = create_app(config)
    with TestClient(app) as tc:
        yield tc


def wait_for_terminal(client, task_id, timeout=60.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = client.get(f"/api/tasks/{task_id}").json()
        if body["status"] in ("succeeded", "failed"):
            return body
        time.sleep(0.1)
    raise TimeoutError(f"task {task_id} did not finish")


def test_create_poll_query_full_cycle(client):
    created = client.post("/api/tasks", json={"region": REGION_ALL, "period": "2020"})
    assert created.status_code == 201
    validate(created.json(), "TaskCreated")
    task_id = created.json()["task_id"]

    status = wait_for_terminal(client, task_id)
    assert status["status"] == "succeeded"
    validate(status, "TaskStatus")
    assert status["progress"]["aggregate"] == 1.0

    # ordered events via cursor
    first = client.get(f"/api/tasks/{task_id}/events").json()
    validate(first, "TaskEvents")
    assert len(first["events"]) >= 3
    seqs = [e["seq"] for e in first["events"]]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    last = seqs[-1]
    assert client.get(f"/api/tasks/{task_id}/events", params={"after": last}).json()["events"] == []

    # heatmap over the full region returns all persisted cells
    heatmap = client.get("/api/heatmap", params={"bbox": BBOX_ALL, "period": "2020"}).json()
    validate(heatmap, "Heatmap")
    assert heatmap["cells"]

    # county detail + trend reflect persisted values
    counties = client.get("/api/counties").json()
    validate(counties, "CountyList")
    scored = None
    for county in counties["counties"]:
        response = client.get(f"/api/counties/{county['county_id']}", params={"period": "2020"})
        if response.status_code == 200:
            scored = response.json()
            validate(scored, "CountyScore")
            break
    assert scored is not None, "no county had data"

    trend = client.get(f"/api/counties/{scored['county_id']}/trend").json()
    validate(trend, "Trend")
    assert {"period": "2020", "value": scored["value"], "cell_count": scored["cell_count"]} in trend[
        "series"
    ]


def test_idempotency_key_returns_same_task(client):
    headers = {"Idempotency-Key": "alpha"}
    a = client.post("/api/tasks", json={"region": REGION_ALL, "period": "2020"}, headers=headers)
    b = client.post("/api/tasks", json={"region": REGION_ALL, "period": "2020"}, headers=headers)
    assert a.json()["task_id"] == b.json()["task_id"]
    c = client.post("/api/tasks", json={"region": REGION_ALL, "period": "2020"})
    assert c.json()["task_id"] != a.json()["task_id"]


def test_invalid_region_is_400(client):
    response = client.post("/api/tasks", json={"region": {}, "period": "2020"})
    assert response.status_code == 400
    validate(response.json(), "ApiError")
    response = client.post("/api/tasks", json={"region": {"bbox": [1, 2, 0, 3]}, "period": "2020"})
    assert response.status_code == 400
    response = client.post("/api/tasks", json={"region": REGION_ALL, "period": ""})
    assert response.status_code == 400


def test_unknown_model_is_404(client, tmp_path):
    response = client.post(
        "/api/tasks",
        json={"region": REGION_ALL, "period": "2020", "model": str(tmp_path / "missing")},
    )
    assert response.status_code == 404
    validate(response.json(), "ApiError")
    assert response.json()["code"] == "UNKNOWN_MODEL"


def test_unknown_task_is_404(client):
    response = client.get("/api/tasks/task-doesnotexist")
    assert response.status_code == 404
    validate(response.json(), "ApiError")
    assert client.get("/api/tasks/task-doesnotexist/events").status_code == 404


def test_malformed_bbox_is_400(client):
    response = client.get("/api/heatmap", params={"bbox": "1,2,3", "period": "2020"})
    assert response.status_code == 400
    validate(response.json(), "ApiError")
    assert response.json()["code"] == "BAD_BBOX"


def test_disjoint_bbox_returns_no_cells(client):
    response = client.get("/api/heatmap", params={"bbox": "0,0,1,1", "period": "2020"})
    assert response.status_code == 200
    assert response.json()["cells"] == []


def test_county_without_data_is_404_no_data(client):
    response = client.get("/api/counties/county-00", params={"period": "1999"})
    assert response.status_code == 404
    assert response.json()["code"] == "NO_DATA"


def test_trend_spans_multiple_periods(small_corpus, tiny_checkpoint, tmp_path):
    store_dir = tmp_path / "store"
    store = Store(store_dir)
    for i, period in enumerate(["2019", "2020", "2021", "2022", "2023"]):
        task_id = f"seed-{period}"
        store.put_task(TaskRecord(task_id=task_id, spec={"period": period}))
        store.update_task_status(task_id, "running")
        store.commit_task_results(
            task_id, [], [], [CountyRow("county-00", period, float(i), 1, task_id)]
        )
    config = ServiceConfig(
        store_dir=str(store_dir),
        data_dir=str(small_corpus.root),
        default_checkpoint=str(tiny_checkpoint),
    )
    with TestClient(create_app(config)) as client:
        trend = client.get(
            "/api/counties/county-00/trend", params={"from": "2019", "to": "2023"}
        ).json()
        validate(trend, "Trend")
        assert [p["period"] for p in trend["series"]] == ["2019", "2020", "2021", "2022", "2023"]
        assert [p["value"] for p in trend["series"]] == [0.0, 1.0, 2.0, 3.0, 4.0]
        clipped = client.get(
            "/api/counties/county-00/trend", params={"from": "2020", "to": "2022"}
        ).json()
        assert [p["period"] for p in clipped["series"]] == ["2020", "2021", "2022"]


def test_gets_are_reproducible_between_commits(client):
    created = client.post("/api/tasks", json={"region": REGION_ALL, "period": "2020"})
    wait_for_terminal(client, created.json()["task_id"])
    a = client.get("/api/heatmap", params={"bbox": BBOX_ALL, "period": "2020"}).json()
    b = client.get("/api/heatmap", params={"bbox": BBOX_ALL, "period": "2020"}).json()
    assert a == b
