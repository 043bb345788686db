"""Image-record manifests: JSON lines, one record per line, paths relative
to the manifest file."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

VALID_HEADINGS = (0, 90, 180, 270)


class ManifestError(ValueError):
    """Record violates the manifest schema."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    kind: str  # satellite | streetview
    lat: float
    lon: float
    path: str
    width: int
    height: int
    heading: int | None = None  # streetview only

    def __post_init__(self):
        if self.kind not in ("satellite", "streetview"):
            raise ManifestError(f"record {self.id}: unknown kind {self.kind!r}")
        if self.kind == "satellite" and self.heading is not None:
            raise ManifestError(f"record {self.id}: satellite records carry no heading")
        if self.kind == "streetview" and self.heading not in VALID_HEADINGS:
            raise ManifestError(
                f"record {self.id}: streetview heading must be one of {VALID_HEADINGS}"
            )

    def to_json(self) -> dict:
        data = {
            "id": self.id,
            "kind": self.kind,
            "lat": self.lat,
            "lon": self.lon,
            "path": self.path,
            "width": self.width,
            "height": self.height,
        }
        if self.heading is not None:
            data["heading"] = self.heading
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ImageRecord":
        return cls(
            id=data["id"],
            kind=data["kind"],
            lat=data["lat"],
            lon=data["lon"],
            path=data["path"],
            width=data["width"],
            height=data["height"],
            heading=data.get("heading"),
        )


def write_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json()) + "\n")


def read_manifest(path: str | Path) -> list[ImageRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ImageRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{path}:{line_no}: bad record: {exc}") from exc
    return records


def resolve_path(record: ImageRecord, manifest_path: str | Path) -> Path:
    """Record paths are relative to the manifest's directory."""
    base = Path(manifest_path).parent
    return (base / record.path).resolve()
