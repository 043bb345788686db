"""Durable table store: tasks, frames, fine-grained scores, county results, events.

Append-only JSON-lines journal per table plus a commit log. Every write
belongs to a transaction; a transaction becomes visible only once its id is
appended (and fsynced) to ``commits.jsonl``, so a crash mid-commit leaves the
store readable with the previous state intact. Torn trailing lines are
ignored on recovery.

Directory layout::

    manifest.json      {"format": "geoscore-store", "schema_version": 1}
    commits.jsonl      {"txn": N} per committed transaction
    tasks.jsonl        journal entries {"txn", "op", ...}
    frames.jsonl
    fine_grained.jsonl
    county.jsonl
    events.jsonl

Concurrency: one writer at a time (internal lock); readers share the lock
briefly and always observe committed state only.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from geoscore.geo import BBox, GeoPoint

SCHEMA_VERSION = 1
TABLES = ("tasks", "frames", "fine_grained", "county", "events")

TASK_STATUSES = ("pending", "running", "succeeded", "failed")
_ALLOWED_TRANSITIONS = {
    "pending": {"running", "failed"},
    "running": {"succeeded", "failed"},
    "succeeded": set(),
    "failed": set(),
}


class ConstraintError(ValueError):
    """A write violates a key or referential-integrity invariant."""


class RecoveryError(ValueError):
    """Store directory is unreadable or has an incompatible schema."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class TaskRecord:
    task_id: str
    spec: dict
    status: str = "pending"
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)


@dataclass
class FrameRecord:
    task_id: str
    frame_id: str  # tile key
    status: str
    pair_count: int


@dataclass
class FineGrainedRow:
    task_id: str
    cell: str
    lat: float
    lon: float
    score: float
    pair_count: int


@dataclass
class CountyRow:
    county_id: str
    period: str
    value: float
    cell_count: int
    task_id: str


@dataclass
class TaskEvent:
    task_id: str
    seq: int
    timestamp: str
    stage: str  # read | score | reduce | aggregate | task
    level: str  # info | warn | error
    message: str
    progress: float


_ROW_TYPES = {
    "tasks": TaskRecord,
    "frames": FrameRecord,
    "fine_grained": FineGrainedRow,
    "county": CountyRow,
    "events": TaskEvent,
}


def _key_of(table: str, row) -> tuple:
    if table == "tasks":
        return (row.task_id,)
    if table == "frames":
        return (row.task_id, row.frame_id)
    if table == "fine_grained":
        return (row.task_id, row.cell)
    if table == "county":
        return (row.county_id, row.period)
    if table == "events":
        return (row.task_id, row.seq)
    raise KeyError(table)


class Transaction:
    """Buffered writes committed atomically across tables."""

    def __init__(self, store: "Store"):
        self._store = store
        self._writes: list[tuple[str, str, dict]] = []  # (table, op, payload)

    def put(self, table: str, row) -> None:
        if not isinstance(row, _ROW_TYPES[table]):
            raise ConstraintError(f"table {table} expects {_ROW_TYPES[table].__name__}")
        self._writes.append((table, "put", {"row": asdict(row)}))

    def delete_task_rows(self, table: str, task_id: str) -> None:
        """Drop every row of ``table`` belonging to ``task_id``."""
        self._writes.append((table, "delete_task", {"task_id": task_id}))


class Store:
    def __init__(self, root: str | Path, create: bool = True):
        self.root = Path(root)
        self._lock = threading.RLock()
        self._tables: dict[str, dict[tuple, tuple[dict, int]]] = {t: {} for t in TABLES}
        self._next_txn = 1
        self._crash_point: str | None = None  # test hook: abort _commit midway
        manifest = self.root / "manifest.json"
        if manifest.exists():
            data = json.loads(manifest.read_text(encoding="utf-8"))
            if data.get("schema_version") != SCHEMA_VERSION:
                raise RecoveryError(
                    f"store schema {data.get('schema_version')} != supported {SCHEMA_VERSION}"
                )
            self._recover()
        elif create:
            self.root.mkdir(parents=True, exist_ok=True)
            manifest.write_text(
                json.dumps({"format": "geoscore-store", "schema_version": SCHEMA_VERSION}),
                encoding="utf-8",
            )
        else:
            raise RecoveryError(f"no store at {self.root}")

    # ----------------------------------------------------------- recovery

    @staticmethod
    def _read_journal(path: Path) -> tuple[list[dict], int]:
        """Journal lines in order plus the byte length of the valid prefix.

        A torn (unparseable or unterminated) trailing line is dropped; an
        unparseable line anywhere else is corruption.
        """
        if not path.exists():
            return [], 0
        data = path.read_bytes()
        entries = []
        valid_len = 0
        offset = 0
        while offset < len(data):
            newline = data.find(b"\n", offset)
            if newline == -1:
                break  # unterminated tail from a crash
            raw = data[offset:newline]
            if raw:
                try:
                    entries.append(json.loads(raw.decode("utf-8")))
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    if data.find(b"\n", newline + 1) == -1:
                        break  # torn tail that happens to contain a newline byte
                    raise RecoveryError(f"{path}: corrupt journal entry at byte {offset}: {exc}") from exc
            offset = newline + 1
            valid_len = offset
        return entries, valid_len

    def _recover(self) -> None:
        commits_path = self.root / "commits.jsonl"
        commit_entries, valid_len = self._read_journal(commits_path)
        self._truncate(commits_path, valid_len)
        committed = {entry["txn"] for entry in commit_entries}
        max_txn = max(committed, default=0)
        for table in TABLES:
            path = self.root / f"{table}.jsonl"
            table_entries, valid_len = self._read_journal(path)
            self._truncate(path, valid_len)
            ops: list[tuple[int, int, str, dict]] = []
            for order, entry in enumerate(table_entries):
                txn = entry["txn"]
                max_txn = max(max_txn, txn)
                if txn in committed:
                    ops.append((txn, order, entry["op"], entry))
            ops.sort(key=lambda item: (item[0], item[1]))
            rows = self._tables[table]
            for txn, _, op, entry in ops:
                self._apply(rows, table, op, entry, txn)
        self._next_txn = max_txn + 1

    @staticmethod
    def _truncate(path: Path, valid_len: int) -> None:
        if path.exists() and path.stat().st_size > valid_len:
            with open(path, "r+b") as fh:
                fh.truncate(valid_len)
                fh.flush()
                os.fsync(fh.fileno())

    @staticmethod
    def _apply(rows: dict, table: str, op: str, entry: dict, txn: int) -> None:
        if op == "put":
            row = _ROW_TYPES[table](**entry["row"])
            rows[_key_of(table, row)] = (entry["row"], txn)
        elif op == "delete_task":
            task_id = entry["task_id"]
            for key in [k for k, (r, _) in rows.items() if r.get("task_id") == task_id]:
                del rows[key]
        else:
            raise RecoveryError(f"unknown journal op {op!r} in {table}")

    # ------------------------------------------------------------- commit

    def transaction(self) -> Transaction:
        return Transaction(self)

    def commit(self, txn: Transaction) -> int:
        with self._lock:
            return self._commit(txn._writes)

    def _append(self, path: Path, payload: dict) -> None:
        line = (json.dumps(payload) + "\n").encode("utf-8")
        with open(path, "ab") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def _check_integrity(self, writes: list[tuple[str, str, dict]]) -> None:
        new_tasks = {w[2]["row"]["task_id"] for w in writes if w[0] == "tasks" and w[1] == "put"}
        for table, op, payload in writes:
            if op != "put" or table in ("tasks",):
                continue
            task_id = payload["row"].get("task_id")
            if task_id and task_id not in new_tasks and (task_id,) not in self._tables["tasks"]:
                raise ConstraintError(f"{table} row cites unknown task {task_id!r}")

    def _commit(self, writes: list[tuple[str, str, dict]]) -> int:
        self._check_integrity(writes)
        txn = self._next_txn
        touched: dict[str, list[dict]] = {}
        for table, op, payload in writes:
            entry = {"txn": txn, "op": op, **payload}
            touched.setdefault(table, []).append(entry)
        for table, entries in touched.items():
            path = self.root / f"{table}.jsonl"
            for entry in entries:
                self._append(path, entry)
        if self._crash_point == "before_commit_line":
            raise _SimulatedCrash()
        if self._crash_point == "exit_before_commit_line":
            os._exit(17)  # hard kill for the crash-safety test
        if self._crash_point == "torn_commit_line":
            with open(self.root / "commits.jsonl", "ab") as fh:
                fh.write(json.dumps({"txn": txn}).encode("utf-8")[:4])
                fh.flush()
                os.fsync(fh.fileno())
            raise _SimulatedCrash()
        self._append(self.root / "commits.jsonl", {"txn": txn})
        for table, entries in touched.items():
            rows = self._tables[table]
            for entry in entries:
                self._apply(rows, table, entry["op"], entry, txn)
        self._next_txn = txn + 1
        return txn

    # ------------------------------------------------------------- tasks

    def put_task(self, record: TaskRecord) -> None:
        with self._lock:
            if (record.task_id,) in self._tables["tasks"]:
                raise ConstraintError(f"task {record.task_id!r} already exists")
            if record.status not in TASK_STATUSES:
                raise ConstraintError(f"unknown status {record.status!r}")
            txn = self.transaction()
            txn.put("tasks", record)
            self.commit(txn)

    def reset_task(self, record: TaskRecord) -> None:
        """Re-register an existing task id for an idempotent re-run.

        Overwrites the record (back to pending); the re-run's result commit
        then atomically replaces the prior rows.
        """
        with self._lock:
            txn = self.transaction()
            txn.put("tasks", record)
            self.commit(txn)

    def get_task(self, task_id: str) -> TaskRecord | None:
        with self._lock:
            found = self._tables["tasks"].get((task_id,))
            return TaskRecord(**found[0]) if found else None

    def update_task_status(self, task_id: str, status: str) -> None:
        with self._lock:
            current = self.get_task(task_id)
            if current is None:
                raise ConstraintError(f"unknown task {task_id!r}")
            if status not in _ALLOWED_TRANSITIONS.get(current.status, set()):
                raise ConstraintError(f"illegal transition {current.status} -> {status}")
            current.status = status
            current.updated_at = _now()
            txn = self.transaction()
            txn.put("tasks", current)
            self.commit(txn)

    def list_tasks(self) -> list[TaskRecord]:
        with self._lock:
            return [TaskRecord(**row) for row, _ in self._tables["tasks"].values()]

    # ------------------------------------------------------------- events

    def append_event(self, task_id: str, stage: str, level: str, message: str, progress: float) -> TaskEvent:
        with self._lock:
            seq = 1 + max(
                (row["seq"] for (tid, _), (row, _x) in self._tables["events"].items() if tid == task_id),
                default=0,
            )
            event = TaskEvent(
                task_id=task_id,
                seq=seq,
                timestamp=_now(),
                stage=stage,
                level=level,
                message=message,
                progress=progress,
            )
            txn = self.transaction()
            txn.put("events", event)
            self.commit(txn)
            return event

    def get_events(self, task_id: str, after: int = 0) -> list[TaskEvent]:
        with self._lock:
            events = [
                TaskEvent(**row)
                for (tid, _), (row, _x) in self._tables["events"].items()
                if tid == task_id and row["seq"] > after
            ]
            return sorted(events, key=lambda e: e.seq)

    # ------------------------------------------------------------ results

    def commit_task_results(
        self,
        task_id: str,
        frames: Iterable[FrameRecord],
        fine_rows: Iterable[FineGrainedRow],
        county_rows: Iterable[CountyRow],
    ) -> None:
        """Atomically replace a task's results and mark it succeeded."""
        with self._lock:
            current = self.get_task(task_id)
            if current is None:
                raise ConstraintError(f"unknown task {task_id!r}")
            if current.status != "running":
                raise ConstraintError(f"cannot commit results for {current.status} task")
            txn = self.transaction()
            txn.delete_task_rows("frames", task_id)
            txn.delete_task_rows("fine_grained", task_id)
            txn.delete_task_rows("county", task_id)
            for frame in frames:
                txn.put("frames", frame)
            for row in fine_rows:
                txn.put("fine_grained", row)
            for row in county_rows:
                txn.put("county", row)
            current.status = "succeeded"
            current.updated_at = _now()
            txn.put("tasks", current)
            self.commit(txn)

    def get_frames(self, task_id: str) -> list[FrameRecord]:
        with self._lock:
            return sorted(
                (FrameRecord(**row) for (tid, _), (row, _x) in self._tables["frames"].items() if tid == task_id),
                key=lambda f: f.frame_id,
            )

    def get_fine_rows(self, task_id: str) -> list[FineGrainedRow]:
        with self._lock:
            return sorted(
                (
                    FineGrainedRow(**row)
                    for (tid, _), (row, _x) in self._tables["fine_grained"].items()
                    if tid == task_id
                ),
                key=lambda r: r.cell,
            )

    def get_county_rows(self, task_id: str) -> list[CountyRow]:
        with self._lock:
            return sorted(
                (CountyRow(**row) for row, _x in self._tables["county"].values() if row["task_id"] == task_id),
                key=lambda r: (r.county_id, r.period),
            )

    # ------------------------------------------------------------ queries

    def query_heatmap(self, bbox: BBox, period: str) -> list[FineGrainedRow]:
        """Fine-grained rows of succeeded tasks for ``period`` whose centers
        fall in ``bbox``; per cell the latest committed row wins."""
        with self._lock:
            succeeded = {
                row["task_id"]
                for row, _x in self._tables["tasks"].values()
                if row["status"] == "succeeded" and row["spec"].get("period") == period
            }
            per_cell: dict[str, tuple[dict, int]] = {}
            for (tid, cell), (row, txn) in self._tables["fine_grained"].items():
                if tid not in succeeded:
                    continue
                if not bbox.contains(GeoPoint(row["lat"], row["lon"])):
                    continue
                held = per_cell.get(cell)
                if held is None or txn > held[1]:
                    per_cell[cell] = (row, txn)
            rows = [FineGrainedRow(**row) for row, _x in per_cell.values()]
            return sorted(rows, key=lambda r: r.cell)

    def query_county(self, county_id: str, period: str) -> CountyRow | None:
        with self._lock:
            found = self._tables["county"].get((county_id, period))
            return CountyRow(**found[0]) if found else None

    def query_trend(self, county_id: str, period_from: str, period_to: str) -> list[CountyRow]:
        """County rows ordered by period; periods compare lexicographically
        (YYYY or YYYY-MM labels)."""
        with self._lock:
            rows = [
                CountyRow(**row)
                for (cid, period), (row, _x) in self._tables["county"].items()
                if cid == county_id and period_from <= period <= period_to
            ]
            return sorted(rows, key=lambda r: r.period)

    # -------------------------------------------------------- maintenance

    def compact(self) -> None:
        """Rewrite journals with only live rows (offline maintenance)."""
        with self._lock:
            for table in TABLES:
                tmp = self.root / f"{table}.jsonl.tmp"
                with open(tmp, "wb") as fh:
                    for key in sorted(self._tables[table]):
                        row, _x = self._tables[table][key]
                        fh.write((json.dumps({"txn": 0, "op": "put", "row": row}) + "\n").encode())
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.root / f"{table}.jsonl")
                self._tables[table] = {k: (row, 0) for k, (row, _x) in self._tables[table].items()}
            tmp = self.root / "commits.jsonl.tmp"
            with open(tmp, "wb") as fh:
                fh.write(b'{"txn": 0}\n')
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.root / "commits.jsonl")
            self._next_txn = 1


class _SimulatedCrash(RuntimeError):
    """Raised by the test-only crash hook inside _commit."""
