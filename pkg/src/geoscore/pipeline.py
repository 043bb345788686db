"""Staged scoring pipeline: read manifests, score pairs in parallel, reduce
per-cell maxima, aggregate to counties, persist atomically.

Stages run sequentially inside ``run_task``; within the scoring stage a pool
of worker processes pulls fixed pair batches. Batch composition depends only
on the canonical pair order (never on the worker count), and each pair's
score is a pure function of its images and the frozen checkpoint, so
persisted results are byte-identical for any ``worker_count``.
"""

from __future__ import annotations

import math
import traceback
from concurrent.futures import FIRST_COMPLETED, Future, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from geoscore.align import AlignedPair, build_pairs
from geoscore.dataio import (
    CorpusPaths,
    DecodeError,
    PreprocessPolicy,
    decode_image,
    load_nightlight_raster,
    preprocess,
    read_manifest,
)
from geoscore.dataio.manifest import ImageRecord
from geoscore.geo import (
    BBox,
    CountyPolygon,
    GeoPoint,
    TileId,
    load_county_polygons,
    point_in_polygon,
    polygon_union_bbox,
    tile_center,
)
from geoscore.model import ForwardContext, forward_scores, load_model
from geoscore.store import CountyRow, FineGrainedRow, FrameRecord, Store, TaskEvent, TaskRecord

SCORE_BATCH = 16
AGGREGATIONS = ("mean", "max", "sum")

EmitFn = Callable[[str, str, str, float], None]


class TaskSpecError(ValueError):
    """Task specification fails validation."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    region: dict  # {"bbox": [min_lat, min_lon, max_lat, max_lon]} or {"counties": [...]}
    period: str
    checkpoint: str
    worker_count: int = 1
    seed: int = 0
    aggregation: str = "mean"

    def __post_init__(self):
        if not self.task_id:
            raise TaskSpecError("task_id must be non-empty")
        if not isinstance(self.period, str) or not self.period:
            raise TaskSpecError("period must be a non-empty string label")
        if self.worker_count < 1:
            raise TaskSpecError("worker_count must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise TaskSpecError(f"aggregation must be one of {AGGREGATIONS}")
        if "bbox" in self.region:
            box = self.region["bbox"]
            if len(box) != 4 or box[0] > box[2] or box[1] > box[3]:
                raise TaskSpecError("region bbox must be [min_lat, min_lon, max_lat, max_lon]")
        elif "counties" in self.region:
            if not self.region["counties"]:
                raise TaskSpecError("region counties list must be non-empty")
        else:
            raise TaskSpecError("region needs either 'bbox' or 'counties'")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "region": self.region,
            "period": self.period,
            "checkpoint": self.checkpoint,
            "worker_count": self.worker_count,
            "seed": self.seed,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            task_id=data["task_id"],
            region=data["region"],
            period=data["period"],
            checkpoint=data["checkpoint"],
            worker_count=data.get("worker_count", 1),
            seed=data.get("seed", 0),
            aggregation=data.get("aggregation", "mean"),
        )


@dataclass(frozen=True)
class CellScore:
    cell: str
    center: GeoPoint
    score: float
    pair_count: int


# ------------------------------------------------------------------ scorer

class PairScorer:
    """Frozen model plus preprocessing, scoring (sat, sv) image-path batches."""

    def __init__(self, checkpoint: str | Path, corpus_root: str | Path):
        self.root = Path(corpus_root)
        self.model, self.scaler, extras = load_model(checkpoint)
        side = self.model.config.image_side
        sat_stats = extras.get("satellite", {"mean": [0.5] * 3, "std": [0.25] * 3})
        sv_stats = extras.get("streetview", sat_stats)
        self.sat_policy = PreprocessPolicy(
            target_side=side, mean=tuple(sat_stats["mean"]), std=tuple(sat_stats["std"])
        )
        self.sv_policy = PreprocessPolicy(
            target_side=side, mean=tuple(sv_stats["mean"]), std=tuple(sv_stats["std"])
        )

    def load_pair(self, sat_rel: str, sv_rel: str) -> tuple[np.ndarray, np.ndarray]:
        sat = preprocess(decode_image(self.root / sat_rel), self.sat_policy)
        sv = preprocess(decode_image(self.root / sv_rel), self.sv_policy)
        return sat, sv

    def score_batch(self, items: Sequence[tuple[str, str]]) -> tuple[list[float | None], list[str]]:
        """Scores aligned with ``items``; None where an image was unreadable."""
        loaded = []
        skipped: list[str] = []
        index_map = []
        for i, (sat_rel, sv_rel) in enumerate(items):
            try:
                loaded.append(self.load_pair(sat_rel, sv_rel))
                index_map.append(i)
            except DecodeError as exc:
                skipped.append(str(exc))
        scores: list[float | None] = [None] * len(items)
        if loaded:
            sat = np.stack([pair[0] for pair in loaded])
            sv = np.stack([pair[1] for pair in loaded])
            out = forward_scores(self.model, sat, sv, ForwardContext(training=False))
            for j, i in enumerate(index_map):
                scores[i] = float(out.data[j])
        return scores, skipped


_WORKER_SCORER: PairScorer | None = None


def _init_worker(checkpoint: str, corpus_root: str) -> None:
    global _WORKER_SCORER
    _WORKER_SCORER = PairScorer(checkpoint, corpus_root)


def _score_batch_remote(batch_index: int, items: list[tuple[str, str]]):
    assert _WORKER_SCORER is not None
    scores, skipped = _WORKER_SCORER.score_batch(items)
    return batch_index, scores, skipped


# ------------------------------------------------------------------ stages

def region_bbox(region: dict, counties: Sequence[CountyPolygon]) -> BBox:
    if "bbox" in region:
        box = region["bbox"]
        return BBox(GeoPoint(box[0], box[1]), GeoPoint(box[2], box[3]))
    wanted = set(region["counties"])
    selected = [c for c in counties if c.county_id in wanted]
    missing = wanted - {c.county_id for c in selected}
    if missing:
        raise TaskSpecError(f"unknown county ids: {sorted(missing)}")
    return polygon_union_bbox(selected)


def stage_read(
    spec: TaskSpec, data: CorpusPaths, counties: Sequence[CountyPolygon]
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Manifest slices for the task region. Street views keep a margin beyond
    the bbox so nearest-neighbor search stays exact near the edges."""
    box = region_bbox(spec.region, counties)
    sats = [r for r in read_manifest(data.satellites) if box.contains(GeoPoint(r.lat, r.lon))]
    cos_lat = max(
        0.05, math.cos(math.radians(min(85.0, max(abs(box.min.lat), abs(box.max.lat)))))
    )
    margin = 5.0 / 111.195 / cos_lat + 0.01
    sv_box = box.expanded(margin)
    svs = [r for r in read_manifest(data.streetviews) if sv_box.contains(GeoPoint(r.lat, r.lon))]
    return sats, svs


def stage_score(
    pairs: Sequence[AlignedPair],
    checkpoint: str | Path,
    corpus_root: str | Path,
    worker_count: int = 1,
    emit: EmitFn | None = None,
    batch_size: int = SCORE_BATCH,
) -> tuple[list[tuple[AlignedPair, float]], int]:
    """Score every pair with the frozen model; canonical output order by
    sat_id; results independent of worker_count. Returns (scored, skipped)."""
    if not pairs:
        return [], 0
    ordered = sorted(pairs, key=lambda p: p.sat_id)
    sat_lookup: dict[str, str] = {}
    sv_lookup: dict[str, str] = {}
    root = Path(corpus_root)
    for record in read_manifest(CorpusPaths(root).satellites):
        sat_lookup[record.id] = record.path
    for record in read_manifest(CorpusPaths(root).streetviews):
        sv_lookup[record.id] = record.path

    batches = [
        [(sat_lookup[p.sat_id], sv_lookup[p.sv_id]) for p in ordered[i : i + batch_size]]
        for i in range(0, len(ordered), batch_size)
    ]
    results: dict[int, list[float | None]] = {}
    skipped_messages: list[str] = []
    total = len(batches)
    emit_every = max(1, total // 10)

    def note_progress(done: int) -> None:
        if emit and (done % emit_every == 0 or done == total):
            emit("score", "info", f"scored {done}/{total} batches", done / max(1, total))

    if worker_count == 1 or total <= 1:
        scorer = PairScorer(checkpoint, corpus_root)
        for b, items in enumerate(batches):
            scores, skipped = scorer.score_batch(items)
            results[b] = scores
            skipped_messages.extend(skipped)
            note_progress(b + 1)
    else:
        with ProcessPoolExecutor(
            max_workers=worker_count,
            initializer=_init_worker,
            initargs=(str(checkpoint), str(corpus_root)),
        ) as pool:
            pending: set[Future] = {
                pool.submit(_score_batch_remote, b, items) for b, items in enumerate(batches)
            }
            done_count = 0
            while pending:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for future in done:
                    b, scores, skipped = future.result()
                    results[b] = scores
                    skipped_messages.extend(skipped)
                    done_count += 1
                    note_progress(done_count)

    scored: list[tuple[AlignedPair, float]] = []
    skipped_count = len(skipped_messages)
    for b in range(total):
        for offset, score in enumerate(results.get(b, [])):
            pair = ordered[b * batch_size + offset]
            if score is not None:
                scored.append((pair, score))
    if emit:
        for message in skipped_messages[:5]:
            emit("score", "warn", f"skipped pair: {message}", 1.0)
        if skipped_count:
            emit("score", "warn", f"{skipped_count} pair(s) skipped", 1.0)
    return scored, skipped_count


def stage_reduce_max(scored: Sequence[tuple[AlignedPair, float]]) -> list[CellScore]:
    """Group scores by satellite tile cell; keep the maximum per cell."""
    grouped: dict[str, list[float]] = {}
    for pair, score in scored:
        grouped.setdefault(pair.cell, []).append(score)
    cells = []
    for cell in sorted(grouped):
        scores = grouped[cell]
        cells.append(
            CellScore(
                cell=cell,
                center=tile_center(TileId.from_key(cell)),
                score=max(scores),
                pair_count=len(scores),
            )
        )
    return cells


def stage_aggregate(
    cells: Sequence[CellScore],
    counties: Sequence[CountyPolygon],
    method: str = "mean",
    emit: EmitFn | None = None,
) -> list[tuple[str, float, int]]:
    """Reduce cell scores to one value per county (cells assigned by center
    containment). Counties with no cells are omitted with a warning."""
    if method not in AGGREGATIONS:
        raise TaskSpecError(f"unknown aggregation {method!r}")
    out = []
    for county in counties:
        inside = [c.score for c in cells if point_in_polygon(c.center, county)]
        if not inside:
            if emit:
                emit("aggregate", "warn", f"county {county.county_id} has no cells; omitted", 1.0)
            continue
        if method == "mean":
            value = float(np.mean(inside))
        elif method == "max":
            value = float(np.max(inside))
        else:
            value = float(np.sum(inside))
        out.append((county.county_id, value, len(inside)))
    return out


# ---------------------------------------------------------------- run task

def run_task(spec: TaskSpec, store: Store, data: CorpusPaths) -> TaskRecord:
    """Execute read -> score -> reduce -> aggregate and persist atomically.

    Terminal status is returned (succeeded/failed); failures discard partial
    results (nothing is written outside the single result commit) and leave
    diagnostic events behind. Re-running a task_id replaces prior results.
    """
    existing = store.get_task(spec.task_id)
    record = TaskRecord(task_id=spec.task_id, spec=spec.to_dict())
    if existing is None:
        store.put_task(record)
    else:
        store.reset_task(record)
    store.update_task_status(spec.task_id, "running")

    def emit(stage: str, level: str, message: str, progress: float) -> None:
        store.append_event(spec.task_id, stage, level, message, progress)

    try:
        emit("read", "info", "reading manifests", 0.0)
        counties = load_county_polygons(data.counties)
        sats, svs = stage_read(spec, data, counties)
        emit("read", "info", f"{len(sats)} satellite / {len(svs)} street-view records in region", 1.0)

        raster = load_nightlight_raster(data.raster)
        emit("score", "info", "aligning pairs", 0.0)
        built = build_pairs(sats, svs, raster)
        emit(
            "score",
            "info",
            f"aligned {len(built.pairs)} pairs (dropped {built.dropped_total})",
            0.0,
        )
        scored, _ = stage_score(
            built.pairs, spec.checkpoint, data.root, spec.worker_count, emit=emit
        )

        cells = stage_reduce_max(scored)
        emit("reduce", "info", f"{len(cells)} cells with maxima", 1.0)

        region_counties = counties
        if "counties" in spec.region:
            wanted = set(spec.region["counties"])
            region_counties = [c for c in counties if c.county_id in wanted]
        aggregated = stage_aggregate(cells, region_counties, spec.aggregation, emit=emit)
        emit("aggregate", "info", f"{len(aggregated)} counties aggregated", 1.0)

        frames = [
            FrameRecord(task_id=spec.task_id, frame_id=c.cell, status="done", pair_count=c.pair_count)
            for c in cells
        ]
        fine_rows = [
            FineGrainedRow(
                task_id=spec.task_id,
                cell=c.cell,
                lat=c.center.lat,
                lon=c.center.lon,
                score=c.score,
                pair_count=c.pair_count,
            )
            for c in cells
        ]
        county_rows = [
            CountyRow(
                county_id=county_id,
                period=spec.period,
                value=value,
                cell_count=count,
                task_id=spec.task_id,
            )
            for county_id, value, count in aggregated
        ]
        store.commit_task_results(spec.task_id, frames, fine_rows, county_rows)
        emit("aggregate", "info", "task succeeded", 1.0)
    except Exception as exc:  # any stage failure -> failed task, no partial rows
        emit("aggregate", "error", f"task failed: {exc}", 1.0)
        store.update_task_status(spec.task_id, "failed")
        record = store.get_task(spec.task_id)
        record.spec["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return record
    return store.get_task(spec.task_id)
