"""Checkpoint format: a JSON manifest plus one raw little-endian blob per parameter.

Round-trips byte-exactly. The manifest carries parameter names, shapes and
dtypes, and an ``extra`` dict for model config / scalers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "geoscore-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint directory is missing, malformed, or inconsistent."""


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    root = Path(path)
    blob_dir = root / "params"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, name in enumerate(sorted(params)):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype == np.float32:
            dtype = "<f4"
        else:
            arr = arr.astype(np.float64, copy=False)
            dtype = "<f8"
        blob = f"p{index:04d}.bin"
        (blob_dir / blob).write_bytes(arr.astype(dtype, copy=False).tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "file": blob})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": entries,
        "extra": extra or {},
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"unrecognized checkpoint format in {manifest_path}")
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        raw = (root / "params" / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        expected = int(np.prod(entry["shape"])) * np.dtype(entry["dtype"]).itemsize
        if len(raw) != expected:
            raise CheckpointError(f"blob {entry['file']} has {len(raw)} bytes, expected {expected}")
        params[entry["name"]] = arr.copy()
    return params, manifest.get("extra", {})
