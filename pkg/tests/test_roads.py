import json

import numpy as np
import pytest
from oracles import check_road_case, random_road_case

from roadflood.raster import GeoTransform, Mask
from roadflood.roads import (
    RoadError,
    RoadFeature,
    RoadNetwork,
    flooded_length,
    intersect,
    load_roads,
    roads_from_geojson,
    segments_to_geojson,
    total_length,
    write_flooded_geojson,
)

GSD = 4.75
GEO = GeoTransform(1000.0, 5000.0, GSD, GSD, 32643)


def world(col, row, geo=GEO):
    return (geo.origin_x + col * geo.pixel_size_x, geo.origin_y - row * geo.pixel_size_y)


def net(*lines, epsg=32643):
    feats = [RoadFeature(f"r{i}", (np.asarray(l, float),)) for i, l in enumerate(lines)]
    return RoadNetwork(tuple(feats), epsg)


# loaders


def _fc(*features, **extra):
    return {"type": "FeatureCollection", "features": list(features), **extra}


def _line(coords, **props):
    return {"type": "Feature", "geometry": {"type": "LineString", "coordinates": coords}, "properties": props}


def test_load_two_linestrings(tmp_path):
    path = tmp_path / "roads.geojson"
    path.write_text(json.dumps(_fc(_line([[0, 0], [1, 1]], id="a"), _line([[2, 2], [3, 3]]), epsg=32643)))
    n = load_roads(path)
    assert [f.road_id for f in n.features] == ["a", "1"]
    assert n.epsg == 32643


def test_multilinestring_is_one_feature():
    feat = {
        "type": "Feature",
        "geometry": {"type": "MultiLineString", "coordinates": [[[0, 0], [1, 0]], [[2, 0], [3, 0]], [[4, 0], [5, 0]]]},
        "properties": {"name": "x"},
    }
    n = roads_from_geojson(_fc(feat))
    assert len(n.features) == 1 and len(n.features[0].polylines) == 3
    assert n.features[0].properties == {"name": "x"}
    assert n.epsg == 4326


def test_polygon_rejected_with_index():
    poly = {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]]}}
    with pytest.raises(RoadError, match="feature 1"):
        roads_from_geojson(_fc(_line([[0, 0], [1, 1]]), poly))


@pytest.mark.parametrize(
    "geometry",
    [{"type": "LineString"}, {"type": "LineString", "coordinates": [[0, 0]]},
     {"type": "LineString", "coordinates": [[0, 0], [float("nan"), 1]]}],
)
def test_bad_coordinates(geometry):
    with pytest.raises(RoadError):
        roads_from_geojson(_fc({"type": "Feature", "geometry": geometry}))


def test_custom_id_key():
    n = roads_from_geojson(_fc(_line([[0, 0], [1, 1]], osm="w42")), id_key="osm")
    assert n.features[0].road_id == "w42"


# intersection


def test_all_dry_mask():
    mask = Mask(np.zeros((16, 16)), GEO)
    assert intersect(mask, net([world(0, 2.5), world(16, 2.5)])) == []


def test_all_wet_mask_spans_polylines():
    mask = Mask(np.ones((16, 16)), GEO)
    roads = net([world(0.2, 2.5), world(15.8, 2.5)], [world(3.5, 0.1), world(3.5, 9.1), world(9.5, 9.1)])
    segs = intersect(mask, roads)
    assert [s.road_id for s in segs] == ["r0", "r1"]
    assert segs[0].length_m == pytest.approx(15.6 * GSD)
    assert segs[1].length_m == pytest.approx(15 * GSD)
    assert segs[1].start == pytest.approx(world(3.5, 0.1))
    assert segs[1].end == pytest.approx(world(9.5, 9.1))


def test_hand_built_block():
    values = np.zeros((16, 16), np.uint8)
    values[7:9, 4:12] = 1
    mask = Mask(values, GEO)
    segs = intersect(mask, net([world(0, 7.5), world(16, 7.5)]))
    assert len(segs) == 1
    spacing = GSD / 2
    assert abs(segs[0].length_m - 38.0) <= spacing
    assert segs[0].sample_count == 16
    assert segs[0].start == pytest.approx(world(4, 7.5))


def test_short_runs_dropped_and_min_run_option():
    values = np.zeros((16, 16), np.uint8)
    values[5, 6] = 1  # one pixel -> two samples, 2.375 m < 3 spacings
    mask = Mask(values, GEO)
    roads = net([world(0, 5.5), world(16, 5.5)])
    assert intersect(mask, roads) == []
    segs = intersect(mask, roads, min_run_m=1.0)
    assert len(segs) == 1 and segs[0].sample_count == 2


def test_crs_and_geographic_checks():
    mask = Mask(np.ones((4, 4)), GEO)
    with pytest.raises(RoadError, match="CRS"):
        intersect(mask, net([world(0, 1), world(4, 1)], epsg=4326))
    geo_deg = GeoTransform(77.5, 13.0, 4e-5, 4e-5, 4326)
    gmask = Mask(np.ones((4, 4)), geo_deg)
    road = net([(77.5, 12.99995), (77.50016, 12.99995)], epsg=4326)
    with pytest.raises(RoadError, match="meters_per_unit"):
        intersect(gmask, road)
    segs = intersect(gmask, road, meters_per_unit=111_000.0)
    assert segs[0].length_m == pytest.approx(0.00016 * 111_000, rel=1e-6)


def test_off_raster_samples_are_dry():
    mask = Mask(np.ones((8, 8)), GEO)
    segs = intersect(mask, net([world(-10, 4.5), world(18, 4.5)]))
    assert len(segs) == 1
    assert segs[0].start[0] == pytest.approx(world(0, 0)[0], abs=GSD / 2)
    assert segs[0].end[0] <= world(8, 0)[0]


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    mask, lines = random_road_case(rng)
    spacing = float(rng.choice([mask.geo.pixel_size_x / 2, mask.geo.pixel_size_x / 3]))
    segs = intersect(mask, net(*lines), sample_spacing_m=spacing)
    check_road_case(mask, lines, segs, spacing, 3 * spacing)
    assert flooded_length(segs) <= total_length(net(*lines)) + 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_adding_water_never_shrinks_segments(seed):
    rng = np.random.default_rng(1000 + seed)
    mask, lines = random_road_case(rng)
    before = intersect(mask, net(*lines))
    more = mask.values | (rng.random(mask.values.shape) > 0.8)
    after = intersect(Mask(more.astype(np.uint8), mask.geo), net(*lines))
    for s in before:
        end = s.start_s + s.length_m / 1.0
        assert any(
            a.road_id == s.road_id and a.part == s.part and a.start_s <= s.start_s + 1e-9
            and a.start_s + a.length_m >= end - 1e-9
            for a in after
        )


def test_ordering_by_road_then_position():
    values = np.zeros((16, 16), np.uint8)
    values[:, 2:5] = 1
    values[:, 9:13] = 1
    mask = Mask(values, GEO)
    roads = RoadNetwork(
        (
            RoadFeature("b", (np.array([world(0, 3.5), world(16, 3.5)]),)),
            RoadFeature("a", (np.array([world(16, 9.5), world(0, 9.5)]),)),
        ),
        32643,
    )
    segs = intersect(mask, roads)
    assert [s.road_id for s in segs] == ["a", "a", "b", "b"]
    assert segs[0].start_s < segs[1].start_s


# GeoJSON output


def test_empty_and_single_output(tmp_path):
    write_flooded_geojson([], tmp_path / "empty.geojson", 32643)
    doc = json.loads((tmp_path / "empty.geojson").read_text())
    assert doc == {"type": "FeatureCollection", "epsg": 32643, "features": []}

    values = np.zeros((16, 16), np.uint8)
    values[7:9, 4:12] = 1
    segs = intersect(Mask(values, GEO), net([world(0, 7.5), world(16, 7.5)]), timestamp="2024-05-01T06:00:00Z")
    doc = segments_to_geojson(segs, 32643)
    (feat,) = doc["features"]
    assert feat["properties"] == {
        "road_id": "r0", "length_m": segs[0].length_m, "timestamp": "2024-05-01T06:00:00Z", "sample_count": 16,
    }
    assert feat["geometry"]["type"] == "LineString"


def test_geojson_round_trip(tmp_path):
    rng = np.random.default_rng(77)
    mask, lines = random_road_case(rng)
    mask = Mask(np.ones_like(mask.values), mask.geo)
    segs = intersect(mask, net(*lines))
    path = tmp_path / "flooded.geojson"
    write_flooded_geojson(segs, path, mask.geo.epsg)
    back = load_roads(path, id_key="road_id")
    assert back.epsg == mask.geo.epsg
    assert len(back.features) == len(segs)
    for f, s in zip(back.features, segs):
        assert f.road_id == s.road_id
        assert np.max(np.abs(f.polylines[0] - np.array(s.coords))) <= 1e-9
