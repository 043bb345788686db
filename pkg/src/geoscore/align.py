"""Satellite-to-street-view pairing: exact grid-indexed nearest neighbor,
5 km distance filtering, and nightlight label assignment.

The grid index is an accelerator only: its answers are exactly the
brute-force nearest neighbor (expanding-ring search with a conservative
geographic bound), with ties broken by lexicographically smallest id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from geoscore.dataio.manifest import ImageRecord
from geoscore.geo import (
    KM_PER_DEGREE,
    EmptyWindowError,
    GeoPoint,
    TileId,
    haversine_km,
    latlon_to_tile,
    nightlight_window_mean,
    tile_center,
)

MAX_PAIR_DISTANCE_KM = 5.0
LABEL_WINDOW_KM = 5.0
CELL_SIZE_DEG = 0.05  # ~5.5 km; a 5 km radius spans <= 3x3 buckets at mid-latitudes
PAIR_ZOOM = 12


class AlignError(ValueError):
    """Inputs violate the pairing contract."""


@dataclass(frozen=True)
class AlignedPair:
    sat_id: str
    sv_id: str
    distance_km: float
    label: float
    cell: str  # satellite tile key, "zoom/x/y"

    def to_json(self) -> dict:
        return {
            "sat_id": self.sat_id,
            "sv_id": self.sv_id,
            "distance_km": self.distance_km,
            "label": self.label,
            "cell": self.cell,
        }

    @classmethod
    def from_json(cls, data: dict) -> "AlignedPair":
        return cls(
            sat_id=data["sat_id"],
            sv_id=data["sv_id"],
            distance_km=data["distance_km"],
            label=data["label"],
            cell=data["cell"],
        )


class SpatialGridIndex:
    """Street-view records bucketed by floor(lat/cell), floor(lon/cell)."""

    def __init__(self, streetviews: Sequence[ImageRecord], cell_deg: float = CELL_SIZE_DEG):
        self.cell_deg = cell_deg
        self.buckets: dict[tuple[int, int], list[ImageRecord]] = {}
        for record in streetviews:
            if record.kind != "streetview":
                raise AlignError(f"index accepts only streetview records, got {record.kind} ({record.id})")
            key = (math.floor(record.lat / cell_deg), math.floor(record.lon / cell_deg))
            self.buckets.setdefault(key, []).append(record)
        if self.buckets:
            keys = list(self.buckets)
            self._lat_range = (min(k[0] for k in keys), max(k[0] for k in keys))
            self._lon_range = (min(k[1] for k in keys), max(k[1] for k in keys))
        else:
            self._lat_range = self._lon_range = (0, -1)

    def __len__(self) -> int:
        return sum(len(v) for v in self.buckets.values())

    def _ring_keys(self, center: tuple[int, int], ring: int) -> Iterable[tuple[int, int]]:
        ci, cj = center
        if ring == 0:
            yield (ci, cj)
            return
        for j in range(cj - ring, cj + ring + 1):
            yield (ci - ring, j)
            yield (ci + ring, j)
        for i in range(ci - ring + 1, ci + ring):
            yield (i, cj - ring)
            yield (i, cj + ring)

    def _ring_min_km(self, p: GeoPoint, ring: int) -> float:
        """Lower bound on the distance from p to any point in a ring-k cell."""
        if ring <= 1:
            return 0.0
        deg = (ring - 1) * self.cell_deg
        worst_lat = min(89.9, abs(p.lat) + (ring + 1) * self.cell_deg)
        cos_floor = max(math.cos(math.radians(worst_lat)), 1e-3)
        return deg * KM_PER_DEGREE * min(1.0, cos_floor)

    def _ring_covers_all(self, center: tuple[int, int], ring: int) -> bool:
        """True once every bucket lies within ``ring`` of the query cell."""
        ci, cj = center
        (lat_lo, lat_hi), (lon_lo, lon_hi) = self._lat_range, self._lon_range
        return (
            ci - ring <= lat_lo and ci + ring >= lat_hi and cj - ring <= lon_lo and cj + ring >= lon_hi
        )

    def nearest(self, p: GeoPoint) -> tuple[ImageRecord, float] | None:
        """Globally nearest record by haversine; ties go to the smaller id."""
        if not self.buckets:
            return None
        center = (math.floor(p.lat / self.cell_deg), math.floor(p.lon / self.cell_deg))
        best: tuple[float, str, ImageRecord] | None = None
        ring = 0
        while True:
            for key in self._ring_keys(center, ring):
                for record in self.buckets.get(key, ()):
                    d = haversine_km(p, GeoPoint(record.lat, record.lon))
                    cand = (d, record.id, record)
                    if best is None or cand[:2] < best[:2]:
                        best = cand
            if self._ring_covers_all(center, ring):
                break
            if best is not None and self._ring_min_km(p, ring + 1) > best[0]:
                break
            ring += 1
        if best is None:
            return None
        return best[2], best[0]


def build_index(streetviews: Sequence[ImageRecord], cell_deg: float = CELL_SIZE_DEG) -> SpatialGridIndex:
    return SpatialGridIndex(streetviews, cell_deg=cell_deg)


def nearest_streetview(index: SpatialGridIndex, sat: ImageRecord) -> tuple[str, float] | None:
    found = index.nearest(GeoPoint(sat.lat, sat.lon))
    if found is None:
        return None
    record, dist = found
    return record.id, dist


@dataclass
class PairBuildResult:
    pairs: list[AlignedPair]
    dropped_no_candidate: int = 0
    dropped_too_far: int = 0
    dropped_empty_window: int = 0

    @property
    def dropped_total(self) -> int:
        return self.dropped_no_candidate + self.dropped_too_far + self.dropped_empty_window


def build_pairs(
    sats: Sequence[ImageRecord],
    svs: Sequence[ImageRecord],
    raster,
    heading: int | None = 0,
    max_distance_km: float = MAX_PAIR_DISTANCE_KM,
    window_km: float = LABEL_WINDOW_KM,
) -> PairBuildResult:
    """One candidate pair per satellite (its nearest street view), filtered to
    ``max_distance_km``, labeled with the nightlight window mean at the
    satellite tile center. Drops are counted, never fatal.

    ``heading`` restricts which street-view headings participate (None = all).
    """
    candidates = [r for r in svs if heading is None or r.heading == heading]
    index = build_index(candidates)
    result = PairBuildResult(pairs=[])
    for sat in sats:
        if sat.kind != "satellite":
            raise AlignError(f"build_pairs expects satellite records, got {sat.kind} ({sat.id})")
        found = index.nearest(GeoPoint(sat.lat, sat.lon))
        if found is None:
            result.dropped_no_candidate += 1
            continue
        sv, dist = found
        if dist > max_distance_km:
            result.dropped_too_far += 1
            continue
        tile = latlon_to_tile(GeoPoint(sat.lat, sat.lon), PAIR_ZOOM)
        try:
            label = nightlight_window_mean(raster, tile_center(tile), window_km)
        except EmptyWindowError:
            result.dropped_empty_window += 1
            continue
        result.pairs.append(
            AlignedPair(sat_id=sat.id, sv_id=sv.id, distance_km=dist, label=label, cell=tile.key())
        )
    return result


def write_pairs(pairs: Iterable[AlignedPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json()) + "\n")


def read_pairs(path: str | Path) -> list[AlignedPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(AlignedPair.from_json(json.loads(line)))
    return pairs
