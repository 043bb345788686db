"""Synthetic corpus generator.

Stands in for live imagery acquisition: draws a smooth latent "development"
field over a region, renders procedural satellite tiles (bright building
blocks whose density tracks the field) and street views (vertical structures
whose count tracks a noisier copy), and emits a nightlight raster equal to
the field plus noise. Deterministic for a fixed seed, byte for byte.

Corpus directory layout::

    corpus.json          config echo + per-modality normalization constants
    truth.json           latent-field parameters and per-record latent values
    satellites.jsonl     satellite ImageRecords (tile centers, zoom-12 grid)
    streetviews.jsonl    street-view ImageRecords (~110 m spacing along roads)
    counties.json        synthetic county polygons (grid over the region)
    nightlight.nlr       NLR1 raster
    images/sat|sv/*.png
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from geoscore.geo import (
    BBox,
    CountyPolygon,
    GeoPoint,
    RasterMeta,
    dump_county_polygons,
    tile_center,
    tiles_covering,
)
from geoscore.dataio.images import encode_image
from geoscore.dataio.manifest import ImageRecord, write_manifest
from geoscore.dataio.raster import NightlightRaster, save_nightlight_raster
from geoscore.numerics import ParameterError

ZOOM = 12
SV_SPACING_DEG = 0.001  # ~110 m between street-view samples along a road

DEFAULT_REGION = BBox(GeoPoint(29.6, 113.0), GeoPoint(31.4, 116.2))


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    n_pairs: int
    region: BBox = DEFAULT_REGION
    sv_per_tile: int = 2
    sat_size: int = 256
    sv_width: int = 480
    sv_height: int = 320
    raster_step: float = 0.0041666667
    raster_noise: float = 0.04
    sat_field_noise: float = 0.05
    sv_field_noise: float = 0.18
    missing_fraction: float = 0.001
    county_grid: int = 3
    headings: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ParameterError("n_pairs must be >= 1")
        if self.sv_per_tile < 1:
            raise ParameterError("sv_per_tile must be >= 1")


@dataclass
class LatentField:
    """Smooth field over the region: a fixed sum of low-frequency cosines,
    min-max normalized to [0, 1] over the raster grid."""

    amps: np.ndarray
    freq_u: np.ndarray
    freq_v: np.ndarray
    phases: np.ndarray
    region: BBox
    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator, region: BBox, n_waves: int = 6) -> "LatentField":
        return cls(
            amps=rng.uniform(0.5, 1.0, size=n_waves),
            freq_u=rng.uniform(0.4, 2.4, size=n_waves),
            freq_v=rng.uniform(0.4, 2.4, size=n_waves),
            phases=rng.uniform(0.0, 2.0 * math.pi, size=n_waves),
            region=region,
        )

    def raw(self, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
        u = (np.asarray(lons) - self.region.min.lon) / (self.region.max.lon - self.region.min.lon)
        v = (np.asarray(lats) - self.region.min.lat) / (self.region.max.lat - self.region.min.lat)
        total = np.zeros(np.broadcast(u, v).shape)
        for a, fu, fv, ph in zip(self.amps, self.freq_u, self.freq_v, self.phases):
            total = total + a * np.cos(2.0 * math.pi * (fu * u + fv * v) + ph)
        return total

    def calibrate(self, lats: np.ndarray, lons: np.ndarray) -> None:
        grid = self.raw(lats[:, None], lons[None, :])
        self.lo = float(grid.min())
        self.hi = float(grid.max())

    def value(self, lat: float, lon: float) -> float:
        span = self.hi - self.lo or 1.0
        return float(np.clip((self.raw(np.array(lat), np.array(lon)) - self.lo) / span, 0.0, 1.0))

    def to_dict(self) -> dict:
        return {
            "amps": self.amps.tolist(),
            "freq_u": self.freq_u.tolist(),
            "freq_v": self.freq_v.tolist(),
            "phases": self.phases.tolist(),
            "lo": self.lo,
            "hi": self.hi,
        }


def render_satellite(rng: np.random.Generator, size: int, develop: float) -> np.ndarray:
    """Dark terrain with bright rectangular blocks; block area fraction grows
    with the development level."""
    base = rng.normal(26.0, 6.0, size=(size, size))
    img = np.stack([base * 0.9, base, base * 0.8])
    area_fraction = 0.03 + 0.42 * develop
    mean_block_side = max(2.0, 0.04 * size)
    n_blocks = max(1, int(round(area_fraction * size * size / (mean_block_side**2))))
    for _ in range(n_blocks):
        side_h = max(1, int(round(rng.uniform(0.5, 1.6) * mean_block_side)))
        side_w = max(1, int(round(rng.uniform(0.5, 1.6) * mean_block_side)))
        top = int(rng.integers(0, max(1, size - side_h)))
        left = int(rng.integers(0, max(1, size - side_w)))
        level = rng.uniform(140.0, 230.0)
        tint = rng.uniform(0.9, 1.1, size=3)
        for c in range(3):
            img[c, top : top + side_h, left : left + side_w] = level * tint[c]
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def render_streetview(rng: np.random.Generator, width: int, height: int, develop: float) -> np.ndarray:
    """Sky over ground with vertical building-like structures; structure count
    grows with the development level."""
    horizon = int(height * 0.45)
    img = np.empty((3, height, width))
    sky = np.linspace(150.0, 200.0, horizon)[::-1]
    img[0, :horizon, :] = sky[:, None] * 0.75
    img[1, :horizon, :] = sky[:, None] * 0.85
    img[2, :horizon, :] = sky[:, None]
    ground = rng.normal(70.0, 9.0, size=(height - horizon, width))
    for c, tint in enumerate((0.95, 0.9, 0.8)):
        img[c, horizon:, :] = ground * tint
    n_structs = max(1, int(round(2.0 + 30.0 * develop)))
    for _ in range(n_structs):
        w = max(1, int(round(rng.uniform(0.012, 0.05) * width)))
        left = int(rng.integers(0, max(1, width - w)))
        top = int(round(horizon * rng.uniform(0.15, 0.8)))
        level = rng.uniform(90.0, 210.0)
        tint = rng.uniform(0.9, 1.1, size=3)
        for c in range(3):
            img[c, top:horizon, left : left + w] = level * tint[c]
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def _channel_stats(paths: list[Path]) -> dict:
    """Per-channel mean/std of pixel/255 across a set of PNGs."""
    from geoscore.dataio.images import decode_image

    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for p in paths:
        arr = decode_image(p).astype(np.float64) / 255.0
        total += arr.sum(axis=(1, 2))
        total_sq += (arr * arr).sum(axis=(1, 2))
        count += arr.shape[1] * arr.shape[2]
    mean = total / count
    var = total_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, 1e-8))
    return {"mean": mean.tolist(), "std": std.tolist()}


def _grid_counties(region: BBox, grid: int) -> list[CountyPolygon]:
    counties = []
    dlat = (region.max.lat - region.min.lat) / grid
    dlon = (region.max.lon - region.min.lon) / grid
    for i in range(grid):
        for j in range(grid):
            lat0 = region.min.lat + i * dlat
            lon0 = region.min.lon + j * dlon
            ring = (
                GeoPoint(lat0, lon0),
                GeoPoint(lat0, lon0 + dlon),
                GeoPoint(lat0 + dlat, lon0 + dlon),
                GeoPoint(lat0 + dlat, lon0),
            )
            counties.append(CountyPolygon(f"county-{i}{j}", f"County {i}-{j}", ring))
    return counties


def synth_corpus(out_dir: str | Path, cfg: SynthConfig) -> dict:
    """Generate the corpus; returns a summary dict (also written as corpus.json)."""
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)

    tiles = tiles_covering(cfg.region, ZOOM)
    if len(tiles) < cfg.n_pairs:
        raise ParameterError(
            f"region holds only {len(tiles)} zoom-{ZOOM} tiles, need {cfg.n_pairs}"
        )
    tiles = tiles[: cfg.n_pairs]

    # raster extent: region plus margin so edge windows stay covered
    margin = 0.06
    origin_lat = cfg.region.max.lat + margin
    origin_lon = cfg.region.min.lon - margin
    rows = int(math.ceil((cfg.region.max.lat - cfg.region.min.lat + 2 * margin) / cfg.raster_step))
    cols = int(math.ceil((cfg.region.max.lon - cfg.region.min.lon + 2 * margin) / cfg.raster_step))
    meta = RasterMeta(origin_lat=origin_lat, origin_lon=origin_lon, step=cfg.raster_step, rows=rows, cols=cols)

    field = LatentField.sample(rng, cfg.region)
    cell_lats = origin_lat - (np.arange(rows) + 0.5) * cfg.raster_step
    cell_lons = origin_lon + (np.arange(cols) + 0.5) * cfg.raster_step
    field.calibrate(cell_lats, cell_lons)

    span = field.hi - field.lo or 1.0
    grid_norm = np.clip((field.raw(cell_lats[:, None], cell_lons[None, :]) - field.lo) / span, 0.0, 1.0)
    values = grid_norm + rng.normal(0.0, cfg.raster_noise, size=grid_norm.shape)
    if cfg.missing_fraction > 0:
        values[rng.random(values.shape) < cfg.missing_fraction] = np.nan
    raster = NightlightRaster(meta=meta, values=values.astype(np.float32))

    (out / "images" / "sat").mkdir(parents=True, exist_ok=True)
    (out / "images" / "sv").mkdir(parents=True, exist_ok=True)

    sat_records: list[ImageRecord] = []
    sv_records: list[ImageRecord] = []
    sat_latent: dict[str, float] = {}
    sv_latent: dict[str, float] = {}

    for t in tiles:
        center = tile_center(t)
        dev = field.value(center.lat, center.lon)
        dev_sat = float(np.clip(dev + rng.normal(0.0, cfg.sat_field_noise), 0.0, 1.0))
        sat_id = f"sat-{t.zoom}-{t.x}-{t.y}"
        rel = f"images/sat/{sat_id}.png"
        encode_image(render_satellite(rng, cfg.sat_size, dev_sat), out / rel)
        sat_records.append(
            ImageRecord(
                id=sat_id,
                kind="satellite",
                lat=center.lat,
                lon=center.lon,
                path=rel,
                width=cfg.sat_size,
                height=cfg.sat_size,
            )
        )
        sat_latent[sat_id] = dev_sat

        # street views along a short road through the tile, ~110 m apart
        theta = rng.uniform(0.0, math.pi)
        for j in range(cfg.sv_per_tile):
            offset = (j - (cfg.sv_per_tile - 1) / 2.0) * SV_SPACING_DEG
            lat = center.lat + offset * math.sin(theta) + rng.normal(0.0, 0.0002)
            lon = center.lon + offset * math.cos(theta) + rng.normal(0.0, 0.0002)
            dev_pt = field.value(lat, lon)
            dev_sv = float(np.clip(dev_pt + rng.normal(0.0, cfg.sv_field_noise), 0.0, 1.0))
            img = render_streetview(rng, cfg.sv_width, cfg.sv_height, dev_sv)
            for heading in cfg.headings:
                sv_id = f"sv-{t.zoom}-{t.x}-{t.y}-{j}-h{heading}"
                rel = f"images/sv/{sv_id}.png"
                encode_image(img, out / rel)
                sv_records.append(
                    ImageRecord(
                        id=sv_id,
                        kind="streetview",
                        lat=lat,
                        lon=lon,
                        path=rel,
                        width=cfg.sv_width,
                        height=cfg.sv_height,
                        heading=heading,
                    )
                )
                sv_latent[sv_id] = dev_sv

    write_manifest(sat_records, out / "satellites.jsonl")
    write_manifest(sv_records, out / "streetviews.jsonl")
    save_nightlight_raster(raster, out / "nightlight.nlr")
    dump_county_polygons(_grid_counties(cfg.region, cfg.county_grid), out / "counties.json")

    truth = {
        "seed": cfg.seed,
        "field": field.to_dict(),
        "sat_latent": sat_latent,
        "sv_latent": sv_latent,
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2), encoding="utf-8")

    summary = {
        "seed": cfg.seed,
        "n_pairs": cfg.n_pairs,
        "region": [cfg.region.min.lat, cfg.region.min.lon, cfg.region.max.lat, cfg.region.max.lon],
        "zoom": ZOOM,
        "counts": {"satellite": len(sat_records), "streetview": len(sv_records)},
        "raster": {"rows": rows, "cols": cols, "step": cfg.raster_step},
        "preprocess": {
            "satellite": _channel_stats([out / r.path for r in sat_records]),
            "streetview": _channel_stats([out / r.path for r in sv_records]),
        },
    }
    (out / "corpus.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


@dataclass
class CorpusPaths:
    """Resolved locations of one corpus directory's artifacts."""

    root: Path
    satellites: Path = field(init=False)
    streetviews: Path = field(init=False)
    raster: Path = field(init=False)
    counties: Path = field(init=False)
    summary: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.satellites = self.root / "satellites.jsonl"
        self.streetviews = self.root / "streetviews.jsonl"
        self.raster = self.root / "nightlight.nlr"
        self.counties = self.root / "counties.json"
        self.summary = self.root / "corpus.json"

    def load_summary(self) -> dict:
        return json.loads(self.summary.read_text(encoding="utf-8"))
