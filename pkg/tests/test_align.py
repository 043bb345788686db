from types import SimpleNamespace

import numpy as np
import pytest

from geoscore.align import (
    AlignError,
    AlignedPair,
    build_index,
    build_pairs,
    nearest_streetview,
    read_pairs,
    write_pairs,
)
from geoscore.dataio import ImageRecord, load_nightlight_raster, read_manifest
from geoscore.geo import GeoPoint, RasterMeta, haversine_km


def sv(record_id, lat, lon, heading=0):
    return ImageRecord(
        id=record_id, kind="streetview", lat=lat, lon=lon, path="x.png", width=8, height=8, heading=heading
    )


def sat(record_id, lat, lon):
    return ImageRecord(id=record_id, kind="satellite", lat=lat, lon=lon, path="x.png", width=8, height=8)


def brute_force_nearest(records, p):
    best = None
    for r in records:
        d = haversine_km(p, GeoPoint(r.lat, r.lon))
        cand = (d, r.id, r)
        if best is None or cand[:2] < best[:2]:
            best = cand
    return best


def constant_raster(value=3.0, origin=(32.0, 112.0), rows=2000, cols=2000, step=0.0041666667):
    meta = RasterMeta(origin_lat=origin[0], origin_lon=origin[1], step=step, rows=rows, cols=cols)
    return SimpleNamespace(meta=meta, values=np.full((rows, cols), value, dtype=np.float32))


# ------------------------------------------------------------------- index

def test_empty_index_returns_none():
    index = build_index([])
    assert index.nearest(GeoPoint(30.0, 114.0)) is None
    assert nearest_streetview(index, sat("s", 30.0, 114.0)) is None


def test_single_record_always_nearest():
    index = build_index([sv("only", 30.0, 114.0)])
    record, dist = index.nearest(GeoPoint(31.5, 115.5))
    assert record.id == "only"
    assert dist == haversine_km(GeoPoint(31.5, 115.5), GeoPoint(30.0, 114.0))


def test_colocated_distance_zero():
    index = build_index([sv("a", 30.0, 114.0), sv("b", 30.3, 114.0)])
    record_id, dist = nearest_streetview(index, sat("s", 30.0, 114.0))
    assert record_id == "a"
    assert dist == 0.0


def test_tie_breaks_to_smaller_id():
    # +-2^-6 degrees of latitude: exactly representable, so both distances
    # evaluate to the same float and only the id breaks the tie
    index = build_index([sv("b", 30.015625, 114.0), sv("a", 29.984375, 114.0)])
    record_id, _ = nearest_streetview(index, sat("s", 30.0, 114.0))
    assert record_id == "a"


def test_rejects_satellite_records():
    with pytest.raises(AlignError):
        build_index([sat("s", 30.0, 114.0)])


@pytest.mark.parametrize("lat_center", [0.0, 30.0, 69.5])
def test_index_matches_brute_force(lat_center):
    rng = np.random.default_rng(int(lat_center) + 1)
    records = [
        sv(f"sv{i:04d}", lat_center + float(rng.uniform(-1.5, 1.5)), 100.0 + float(rng.uniform(-2, 2)))
        for i in range(400)
    ]
    index = build_index(records)
    for _ in range(60):
        p = GeoPoint(lat_center + float(rng.uniform(-1.8, 1.8)), 100.0 + float(rng.uniform(-2.4, 2.4)))
        got = index.nearest(p)
        want = brute_force_nearest(records, p)
        assert got[0].id == want[2].id
        assert got[1] == pytest.approx(want[0], abs=1e-12)


def test_index_exact_when_nearest_is_far_away():
    # all candidates many rings away from the query cell
    records = [sv("far-b", 31.0, 115.0), sv("far-a", 31.0, 115.001)]
    index = build_index(records)
    record, dist = index.nearest(GeoPoint(30.0, 114.0))
    want = brute_force_nearest(records, GeoPoint(30.0, 114.0))
    assert record.id == want[2].id
    assert dist == pytest.approx(want[0])


# ------------------------------------------------------------------- pairs

def test_pairs_filtered_beyond_five_km():
    # ~6 km east at lat 30
    result = build_pairs([sat("s", 30.0, 114.0)], [sv("v", 30.0, 114.0624)], constant_raster())
    assert result.pairs == []
    assert result.dropped_too_far == 1


def test_pairs_constant_raster_label():
    result = build_pairs([sat("s", 30.0, 114.0)], [sv("v", 30.001, 114.001)], constant_raster(3.0))
    assert len(result.pairs) == 1
    pair = result.pairs[0]
    assert pair.label == pytest.approx(3.0)
    assert pair.distance_km <= 5.0
    assert pair.cell.startswith("12/")


def test_pairs_empty_window_dropped():
    raster = constant_raster(1.0, origin=(1.0, 1.0), rows=4, cols=4)  # nowhere near the sat
    result = build_pairs([sat("s", 30.0, 114.0)], [sv("v", 30.0, 114.0)], raster)
    assert result.pairs == []
    assert result.dropped_empty_window == 1


def test_pairs_no_candidates():
    result = build_pairs([sat("s", 30.0, 114.0)], [], constant_raster())
    assert result.dropped_no_candidate == 1


def test_pairs_heading_filter():
    svs = [sv("v0", 30.0005, 114.0, heading=0), sv("v90", 30.0, 114.0, heading=90)]
    by_default = build_pairs([sat("s", 30.0, 114.0)], svs, constant_raster())
    assert by_default.pairs[0].sv_id == "v0"  # heading-90 record not considered
    any_heading = build_pairs([sat("s", 30.0, 114.0)], svs, constant_raster(), heading=None)
    assert any_heading.pairs[0].sv_id == "v90"


def test_pairs_streetview_reuse_allowed():
    sats = [sat("s1", 30.0, 114.0), sat("s2", 30.01, 114.0)]
    svs = [sv("v", 30.005, 114.0)]
    result = build_pairs(sats, svs, constant_raster())
    assert [p.sv_id for p in result.pairs] == ["v", "v"]


def test_pairs_match_brute_force_on_corpus(small_corpus):
    sats = read_manifest(small_corpus.satellites)
    svs = read_manifest(small_corpus.streetviews)
    raster = load_nightlight_raster(small_corpus.raster)
    result = build_pairs(sats, svs, raster)
    assert result.pairs, "corpus produced no pairs"
    assert all(p.distance_km <= 5.0 for p in result.pairs)

    candidates = [r for r in svs if r.heading == 0]
    expected_ids = {}
    for s in sats:
        want = brute_force_nearest(candidates, GeoPoint(s.lat, s.lon))
        if want and want[0] <= 5.0:
            expected_ids[s.id] = want[2].id
    got_ids = {p.sat_id: p.sv_id for p in result.pairs}
    assert got_ids == expected_ids


def test_pairs_deterministic(small_corpus):
    sats = read_manifest(small_corpus.satellites)
    svs = read_manifest(small_corpus.streetviews)
    raster = load_nightlight_raster(small_corpus.raster)
    a = build_pairs(sats, svs, raster).pairs
    b = build_pairs(sats, svs, raster).pairs
    assert a == b


def test_pairs_round_trip_jsonl(tmp_path):
    pairs = [
        AlignedPair(sat_id="s", sv_id="v", distance_km=1.25, label=0.5, cell="12/3372/1552"),
    ]
    path = tmp_path / "pairs.jsonl"
    write_pairs(pairs, path)
    assert read_pairs(path) == pairs
