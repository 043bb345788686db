"""REST service over the store and pipeline.

Task-oriented API: create a scoring task (asynchronous; returns immediately),
poll its status and ordered events with a cursor, and query persisted
heatmap/county/trend results. Every non-2xx response carries
``{"status", "code", "message"}``. GETs never mutate state.
"""

from __future__ import annotations

import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from geoscore.dataio import CorpusPaths
from geoscore.geo import BBox, GeoPoint, GeoRangeError, load_county_polygons
from geoscore.pipeline import TaskSpec, TaskSpecError, run_task
from geoscore.store import Store

EVENT_WAIT_CAP_S = 10.0
_STAGES = ("read", "score", "reduce", "aggregate")


@dataclass
class ServiceConfig:
    store_dir: str
    data_dir: str
    default_checkpoint: str | None = None
    default_workers: int = 1


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class TaskCreateRequest(BaseModel):
    region: dict
    period: str
    model: str | None = None
    worker_count: int | None = Field(default=None, ge=1)
    seed: int = 0
    aggregation: str = "mean"


def _parse_bbox(raw: str) -> BBox:
    try:
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != 4:
            raise ValueError("need 4 comma-separated numbers")
        return BBox(GeoPoint(parts[0], parts[1]), GeoPoint(parts[2], parts[3]))
    except (ValueError, GeoRangeError) as exc:
        raise ApiError(400, "BAD_BBOX", f"malformed bbox {raw!r}: {exc}") from exc


def create_app(config: ServiceConfig) -> FastAPI:
    store = Store(config.store_dir)
    data = CorpusPaths(Path(config.data_dir))
    executor = ThreadPoolExecutor(max_workers=2, thread_name_prefix="task")
    idempotency: dict[str, str] = {}
    lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        executor.shutdown(wait=False, cancel_futures=True)

    app = FastAPI(title="geoscore", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.store = store
    app.state.executor = executor

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"status": exc.status, "code": exc.code, "message": exc.message},
        )

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"status": 400, "code": "INVALID_REQUEST", "message": str(exc.errors()[:3])},
        )

    # ------------------------------------------------------------- tasks

    @app.post("/api/tasks", status_code=201)
    def create_task(
        body: TaskCreateRequest,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> dict:
        with lock:
            if idempotency_key and idempotency_key in idempotency:
                return {"task_id": idempotency[idempotency_key]}
        checkpoint = body.model or config.default_checkpoint
        if not checkpoint:
            raise ApiError(400, "NO_MODEL", "no model checkpoint given and no server default")
        if not (Path(checkpoint) / "manifest.json").is_file():
            raise ApiError(404, "UNKNOWN_MODEL", f"no checkpoint at {checkpoint}")
        task_id = f"task-{uuid.uuid4().hex[:12]}"
        try:
            spec = TaskSpec(
                task_id=task_id,
                region=body.region,
                period=body.period,
                checkpoint=str(checkpoint),
                worker_count=body.worker_count or config.default_workers,
                seed=body.seed,
                aggregation=body.aggregation,
            )
        except TaskSpecError as exc:
            raise ApiError(400, "INVALID_SPEC", str(exc)) from exc
        with lock:
            if idempotency_key:
                idempotency[idempotency_key] = task_id
        executor.submit(run_task, spec, store, data)
        return {"task_id": task_id}

    @app.get("/api/tasks/{task_id}")
    def get_task(task_id: str) -> dict:
        record = store.get_task(task_id)
        if record is None:
            raise ApiError(404, "UNKNOWN_TASK", f"no task {task_id}")
        progress = {stage: 0.0 for stage in _STAGES}
        for event in store.get_events(task_id):
            if event.stage in progress:
                progress[event.stage] = max(progress[event.stage], event.progress)
        if record.status == "succeeded":
            progress = {stage: 1.0 for stage in _STAGES}
        return {
            "task_id": record.task_id,
            "status": record.status,
            "progress": progress,
            "created_at": record.created_at,
            "updated_at": record.updated_at,
        }

    @app.get("/api/tasks/{task_id}/events")
    def get_events(task_id: str, after: int = 0, wait: float = 0.0) -> dict:
        if store.get_task(task_id) is None:
            raise ApiError(404, "UNKNOWN_TASK", f"no task {task_id}")
        deadline = time.monotonic() + min(max(wait, 0.0), EVENT_WAIT_CAP_S)
        while True:
            events = store.get_events(task_id, after=after)
            if events or time.monotonic() >= deadline:
                break
            time.sleep(0.05)
        return {
            "task_id": task_id,
            "events": [
                {
                    "seq": e.seq,
                    "timestamp": e.timestamp,
                    "stage": e.stage,
                    "level": e.level,
                    "message": e.message,
                    "progress": e.progress,
                }
                for e in events
            ],
        }

    # ------------------------------------------------------------ queries

    @app.get("/api/heatmap")
    def heatmap(bbox: str, period: str) -> dict:
        box = _parse_bbox(bbox)
        rows = store.query_heatmap(box, period)
        return {
            "period": period,
            "cells": [
                {
                    "cell": r.cell,
                    "lat": r.lat,
                    "lon": r.lon,
                    "score": r.score,
                    "pair_count": r.pair_count,
                }
                for r in rows
            ],
        }

    @app.get("/api/counties")
    def counties() -> dict:
        loaded = load_county_polygons(data.counties)
        return {
            "counties": [
                {
                    "county_id": c.county_id,
                    "name": c.name,
                    "ring": [[p.lat, p.lon] for p in c.ring],
                }
                for c in loaded
            ]
        }

    @app.get("/api/counties/{county_id}")
    def county_score(county_id: str, period: str) -> dict:
        row = store.query_county(county_id, period)
        if row is None:
            raise ApiError(404, "NO_DATA", f"no data for county {county_id} in {period}")
        return {
            "county_id": row.county_id,
            "period": row.period,
            "value": row.value,
            "cell_count": row.cell_count,
            "task_id": row.task_id,
        }

    @app.get("/api/counties/{county_id}/trend")
    def trend(
        county_id: str,
        period_from: str = Query(default="", alias="from"),
        period_to: str = Query(default="~", alias="to"),  # '~' sorts after digit labels
    ) -> dict:
        rows = store.query_trend(county_id, period_from, period_to)
        return {
            "county_id": county_id,
            "series": [{"period": r.period, "value": r.value, "cell_count": r.cell_count} for r in rows],
        }

    return app
