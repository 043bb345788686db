"""Coordinate systems, Web-Mercator tile geometry, distances, raster indexing,
and county-polygon containment.

All functions are pure over immutable inputs and thread-safe. Conventions:

* WGS-84 degrees everywhere; longitude is x, latitude is y.
* Slippy-map tiling: tile (0, 0) is the north-west corner, y grows south.
* Rasters are row-major with row 0 at the north edge; ``origin_lat`` /
  ``origin_lon`` name the north-west corner of cell (0, 0), not its center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088
MERCATOR_LAT_LIMIT = 85.05112878
KM_PER_DEGREE = EARTH_RADIUS_KM * math.pi / 180.0  # ~111.195 km per degree of latitude


class GeoRangeError(ValueError):
    """A coordinate or zoom level is outside its documented range."""


class InvalidPolygonError(ValueError):
    """Polygon has fewer than 3 distinct vertices."""


class RasterBoundsError(ValueError):
    """Point falls outside the raster extent."""


class EmptyWindowError(ValueError):
    """No non-missing raster cell center falls inside the requested window."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeoRangeError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise GeoRangeError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoRangeError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class TileId:
    zoom: int
    x: int
    y: int

    def __post_init__(self):
        if not 0 <= self.zoom <= 19:
            raise GeoRangeError(f"zoom {self.zoom} outside [0, 19]")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise GeoRangeError(f"tile ({self.x}, {self.y}) outside grid at zoom {self.zoom}")

    def key(self) -> str:
        return f"{self.zoom}/{self.x}/{self.y}"

    @classmethod
    def from_key(cls, key: str) -> "TileId":
        zoom, x, y = (int(part) for part in key.split("/"))
        return cls(zoom, x, y)


@dataclass(frozen=True)
class BBox:
    min: GeoPoint
    max: GeoPoint

    def __post_init__(self):
        if self.min.lat > self.max.lat or self.min.lon > self.max.lon:
            raise GeoRangeError("bbox min must not exceed max")

    def center(self) -> GeoPoint:
        return GeoPoint((self.min.lat + self.max.lat) / 2.0, (self.min.lon + self.max.lon) / 2.0)

    def contains(self, p: GeoPoint) -> bool:
        return self.min.lat <= p.lat <= self.max.lat and self.min.lon <= p.lon <= self.max.lon

    def expanded(self, margin_deg: float) -> "BBox":
        return BBox(
            GeoPoint(max(-90.0, self.min.lat - margin_deg), max(-180.0, self.min.lon - margin_deg)),
            GeoPoint(min(90.0, self.max.lat + margin_deg), min(180.0, self.max.lon + margin_deg)),
        )


@dataclass(frozen=True)
class RasterMeta:
    origin_lat: float  # north edge of row 0
    origin_lon: float  # west edge of col 0
    step: float  # degrees per cell on both axes
    rows: int
    cols: int

    def __post_init__(self):
        if self.step <= 0:
            raise GeoRangeError(f"raster step must be positive, got {self.step}")
        if self.rows <= 0 or self.cols <= 0:
            raise GeoRangeError("raster dimensions must be positive")

    def cell_center(self, row: int, col: int) -> GeoPoint:
        return GeoPoint(
            self.origin_lat - (row + 0.5) * self.step,
            self.origin_lon + (col + 0.5) * self.step,
        )


@dataclass(frozen=True)
class CountyPolygon:
    county_id: str
    name: str
    ring: tuple[GeoPoint, ...]  # closure implicit: last vertex need not repeat the first

    def __post_init__(self):
        if len({(p.lat, p.lon) for p in self.ring}) < 3:
            raise InvalidPolygonError(f"county {self.county_id}: ring needs >= 3 distinct vertices")

    def open_ring(self) -> tuple[GeoPoint, ...]:
        """Ring without a duplicated closing vertex."""
        ring = self.ring
        if len(ring) > 1 and ring[0] == ring[-1]:
            return ring[:-1]
        return ring

    def bbox(self) -> BBox:
        lats = [p.lat for p in self.ring]
        lons = [p.lon for p in self.ring]
        return BBox(GeoPoint(min(lats), min(lons)), GeoPoint(max(lats), max(lons)))


def latlon_to_tile(p: GeoPoint, zoom: int) -> TileId:
    """Slippy-map tile containing ``p`` at ``zoom``.

    Latitude beyond the Mercator limit (+-85.05112878) raises GeoRangeError.
    """
    if not 0 <= zoom <= 19:
        raise GeoRangeError(f"zoom {zoom} outside [0, 19]")
    if abs(p.lat) > MERCATOR_LAT_LIMIT:
        raise GeoRangeError(f"latitude {p.lat} beyond Mercator limit {MERCATOR_LAT_LIMIT}")
    n = 1 << zoom
    x = math.floor((p.lon + 180.0) / 360.0 * n)
    phi = math.radians(p.lat)
    y = math.floor((1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n)
    # lon == 180 or lat == -limit land exactly on the far grid edge; clamp into range
    x = min(max(x, 0), n - 1)
    y = min(max(y, 0), n - 1)
    return TileId(zoom, x, y)


def tile_to_bbox(t: TileId) -> BBox:
    """Geographic bounds of a tile; inverse of :func:`latlon_to_tile` at the center."""
    n = 1 << t.zoom
    lon_min = t.x / n * 360.0 - 180.0
    lon_max = (t.x + 1) / n * 360.0 - 180.0
    lat_max = _mercator_y_to_lat(t.y / n)
    lat_min = _mercator_y_to_lat((t.y + 1) / n)
    return BBox(GeoPoint(lat_min, lon_min), GeoPoint(lat_max, lon_max))


def tile_center(t: TileId) -> GeoPoint:
    return tile_to_bbox(t).center()


def _mercator_y_to_lat(y: float) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y))))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km, mean Earth radius 6371.0088 km."""
    la1, lo1 = math.radians(a.lat), math.radians(a.lon)
    la2, lo2 = math.radians(b.lat), math.radians(b.lon)
    h = math.sin((la2 - la1) / 2.0) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


_EDGE_EPS = 1e-12


def _on_segment(px: float, py: float, x1: float, y1: float, x2: float, y2: float) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
    if abs(cross) > _EDGE_EPS * scale:
        return False
    return min(x1, x2) - _EDGE_EPS <= px <= max(x1, x2) + _EDGE_EPS and (
        min(y1, y2) - _EDGE_EPS <= py <= max(y1, y2) + _EDGE_EPS
    )


def point_in_polygon(p: GeoPoint, poly: CountyPolygon) -> bool:
    """Even-odd (ray-casting) containment in lon/lat space; boundary counts as inside."""
    ring = poly.open_ring()
    if len(ring) < 3:
        raise InvalidPolygonError(f"county {poly.county_id}: ring needs >= 3 vertices")
    px, py = p.lon, p.lat
    inside = False
    j = len(ring) - 1
    for i in range(len(ring)):
        x1, y1 = ring[j].lon, ring[j].lat
        x2, y2 = ring[i].lon, ring[i].lat
        if _on_segment(px, py, x1, y1, x2, y2):
            return True
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if x_cross > px:
                inside = not inside
        j = i
    return inside


def raster_cell_index(meta: RasterMeta, p: GeoPoint) -> tuple[int, int]:
    """(row, col) of the cell containing ``p``; row 0 at the north edge."""
    col = math.floor((p.lon - meta.origin_lon) / meta.step)
    row = math.floor((meta.origin_lat - p.lat) / meta.step)
    if not (0 <= row < meta.rows and 0 <= col < meta.cols):
        raise RasterBoundsError(
            f"point ({p.lat}, {p.lon}) outside raster extent (row={row}, col={col})"
        )
    return row, col


def window_half_extent_deg(center: GeoPoint, side_km: float) -> tuple[float, float]:
    """Half-extents (dlat, dlon) in degrees of a square window of side ``side_km``.

    Locally flat approximation: latitude via the meridian scale, longitude
    shrunk by cos(latitude). Degenerate near the poles.
    """
    if side_km <= 0:
        raise GeoRangeError(f"window side must be positive, got {side_km}")
    cos_lat = math.cos(math.radians(center.lat))
    if cos_lat <= 1e-6:
        raise GeoRangeError(f"window undefined at latitude {center.lat}")
    half_lat = side_km / 2.0 / KM_PER_DEGREE
    half_lon = side_km / 2.0 / (KM_PER_DEGREE * cos_lat)
    return half_lat, half_lon


def nightlight_window_mean(raster, center: GeoPoint, side_km: float) -> float:
    """Mean of raster cells whose centers fall in the square window around ``center``.

    ``raster`` is any object with ``meta: RasterMeta`` and ``values`` (rows x cols
    float array, NaN = missing). NaN cells are excluded; a window with no
    contributing cell raises EmptyWindowError.
    """
    meta: RasterMeta = raster.meta
    values = np.asarray(raster.values, dtype=np.float64)
    half_lat, half_lon = window_half_extent_deg(center, side_km)

    # candidate index range, then exact center-inclusion test (boundary inclusive)
    row_lo = max(0, math.floor((meta.origin_lat - (center.lat + half_lat)) / meta.step - 0.5))
    row_hi = min(meta.rows, math.ceil((meta.origin_lat - (center.lat - half_lat)) / meta.step + 0.5))
    col_lo = max(0, math.floor(((center.lon - half_lon) - meta.origin_lon) / meta.step - 0.5))
    col_hi = min(meta.cols, math.ceil(((center.lon + half_lon) - meta.origin_lon) / meta.step + 0.5))
    if row_lo >= row_hi or col_lo >= col_hi:
        raise EmptyWindowError("window does not overlap raster extent")

    rows = np.arange(row_lo, row_hi)
    cols = np.arange(col_lo, col_hi)
    lat_centers = meta.origin_lat - (rows + 0.5) * meta.step
    lon_centers = meta.origin_lon + (cols + 0.5) * meta.step
    row_mask = np.abs(lat_centers - center.lat) <= half_lat
    col_mask = np.abs(lon_centers - center.lon) <= half_lon
    if not row_mask.any() or not col_mask.any():
        raise EmptyWindowError("no cell center inside window")

    window = values[np.ix_(rows[row_mask], cols[col_mask])]
    finite = window[np.isfinite(window)]
    if finite.size == 0:
        raise EmptyWindowError("all cells in window are missing")
    return float(finite.mean())


def load_county_polygons(path: str | Path) -> list[CountyPolygon]:
    """Load the county polygon interchange format: JSON array of
    ``{county_id, name, ring: [[lat, lon], ...]}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    counties = []
    for entry in raw:
        ring = tuple(GeoPoint(lat, lon) for lat, lon in entry["ring"])
        counties.append(CountyPolygon(entry["county_id"], entry["name"], ring))
    return counties


def dump_county_polygons(counties: Iterable[CountyPolygon], path: str | Path) -> None:
    payload = [
        {"county_id": c.county_id, "name": c.name, "ring": [[p.lat, p.lon] for p in c.ring]}
        for c in counties
    ]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def tiles_covering(bbox: BBox, zoom: int) -> list[TileId]:
    """Tiles at ``zoom`` whose centers fall inside ``bbox``, row-major from the NW."""
    lat_lo = max(bbox.min.lat, -MERCATOR_LAT_LIMIT)
    lat_hi = min(bbox.max.lat, MERCATOR_LAT_LIMIT)
    if lat_lo > lat_hi:
        return []
    nw = latlon_to_tile(GeoPoint(lat_hi, bbox.min.lon), zoom)
    se = latlon_to_tile(GeoPoint(lat_lo, bbox.max.lon), zoom)
    tiles = []
    for y in range(nw.y, se.y + 1):
        for x in range(nw.x, se.x + 1):
            t = TileId(zoom, x, y)
            if bbox.contains(tile_center(t)):
                tiles.append(t)
    return tiles


def polygon_union_bbox(counties: Sequence[CountyPolygon]) -> BBox:
    if not counties:
        raise GeoRangeError("no counties given")
    boxes = [c.bbox() for c in counties]
    return BBox(
        GeoPoint(min(b.min.lat for b in boxes), min(b.min.lon for b in boxes)),
        GeoPoint(max(b.max.lat for b in boxes), max(b.max.lon for b in boxes)),
    )
