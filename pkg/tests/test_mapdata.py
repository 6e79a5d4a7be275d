import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facadeloc.mapdata import (BuildingMap, FormatError, ValidationError, dumps_map, edge_direction_angle,
                               facade_edges, load_map, lonlat_to_local, make_building, map_from_dict,
                               map_from_geojson, point_in_polygon, save_map, signed_area)

SQUARE = [[0, 0], [10, 0], [10, 10], [0, 10]]


def write(tmp_path, doc, name="map.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


def test_square_map(tmp_path):
    bmap = load_map(write(tmp_path, {"origin": {"lat": 0, "lon": 0}, "buildings": [{"id": "A", "polygon": SQUARE}]}))
    assert len(bmap) == 1
    edges = facade_edges(bmap)
    assert len(edges) == 4
    assert bmap.bounds == (0.0, 0.0, 10.0, 10.0)
    assert [e.direction_angle for e in edges] == [0.0, 90.0, 0.0, 90.0]


def test_duplicate_id_rejected(tmp_path):
    doc = {"buildings": [{"id": "A", "polygon": SQUARE},
                         {"id": "A", "polygon": [[20, 0], [30, 0], [30, 10]]}]}
    with pytest.raises(ValidationError):
        load_map(write(tmp_path, doc))


def test_two_triangles_six_edges():
    bmap = BuildingMap((make_building("A", [(0, 0), (4, 0), (0, 3)]),
                        make_building("B", [(10, 0), (14, 0), (10, 3)])))
    assert len(facade_edges(bmap)) == 6


def test_diagonal_edge_angle():
    assert edge_direction_angle((0, 0), (3, 3)) == pytest.approx(45.0, abs=1e-9)


@pytest.mark.parametrize("poly", [
    [[0, 0], [1, 0]],                          # too few vertices
    [[0, 0], [1, 0], [2, 0]],                  # zero area
    [[0, 0], [1, 0], [1, 0], [0, 1]],          # consecutive duplicate
    [[0, 0], [1, 0], [0, 1], [0, 0]],          # closing vertex duplicates the first
    [[0, 0], [2, 2], [2, 0], [0, 2]],          # bow tie
    [[0, 0], [1, 0], [float("nan"), 1]],
])
def test_degenerate_polygons(poly):
    with pytest.raises(ValidationError):
        make_building("A", poly)


def test_parse_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        load_map(p)
    with pytest.raises(FormatError):
        map_from_dict({"buildings": [{"id": "A"}]})
    with pytest.raises(FormatError):
        map_from_dict({"buildings": [{"id": "A", "polygon": [[0, 0], [1], [0, 1]]}]})
    with pytest.raises(FormatError):
        map_from_dict([])


def test_clockwise_input_normalized_ccw():
    b = make_building("A", SQUARE[::-1])
    assert signed_area(b.polygon) > 0
    assert b.polygon[0] == (0.0, 10.0)  # first vertex kept


def test_round_trip_canonical(tmp_path):
    bmap = BuildingMap((make_building("A", SQUARE, name="Hall"), make_building("B", [(20, 0), (30, 0), (25, 8)])),
                       origin=(48.1, 11.5))
    p = tmp_path / "m.json"
    save_map(bmap, p)
    text = p.read_text(encoding="utf-8")
    again = load_map(p)
    assert again == bmap
    assert dumps_map(again) == text


def test_point_in_polygon_strict():
    x = np.array([5.0, 0.0, 10.0, 5.0, -1.0])
    y = np.array([5.0, 0.0, 5.0, 0.0, 5.0])
    assert point_in_polygon(x, y, [tuple(v) for v in SQUARE]).tolist() == [True, False, False, False, False]


def test_geojson_conversion():
    lat0, lon0 = 40.0, -75.0
    dlat = math.degrees(10.0 / 6378137.0)
    dlon = dlat / math.cos(math.radians(lat0))
    ring = [[lon0, lat0], [lon0 + dlon, lat0], [lon0 + dlon, lat0 + dlat], [lon0, lat0 + dlat], [lon0, lat0]]
    doc = {"type": "FeatureCollection",
           "features": [{"type": "Feature", "properties": {"id": "A"}, "geometry": {"type": "Polygon",
                                                                                   "coordinates": [ring]}}]}
    bmap = map_from_geojson(doc, origin=(lat0, lon0))
    pts = np.array(bmap["A"].polygon)
    assert len(pts) == 4
    np.testing.assert_allclose(pts, [[0, 0], [10, 0], [10, 10], [0, 10]], atol=1e-6)
    doc["features"][0]["geometry"]["type"] = "MultiPolygon"
    with pytest.raises(ValidationError):
        map_from_geojson(doc)


def test_lonlat_origin_is_zero():
    assert lonlat_to_local(11.5, 48.1, (48.1, 11.5)) == (0.0, 0.0)


coord = st.floats(-1e3, 1e3, allow_nan=False)


@given(coord, coord, coord, coord)
def test_direction_angle_symmetric(x0, y0, x1, y1):
    if (x0, y0) == (x1, y1):
        return
    a = edge_direction_angle((x0, y0), (x1, y1))
    b = edge_direction_angle((x1, y1), (x0, y0))
    assert 0.0 <= a < 180.0
    assert min(abs(a - b), 180.0 - abs(a - b)) < 1e-9
    ref = math.degrees(math.atan2(y1 - y0, x1 - x0)) % 180.0
    assert min(abs(a - ref), 180.0 - abs(a - ref)) < 1e-9


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 400), st.floats(0, 400), st.floats(5, 30), st.floats(0, 90)),
                min_size=1, max_size=6))
def test_edge_count_and_bounds(rects):
    buildings = []
    for k, (cx, cy, s, ang) in enumerate(rects):
        c, sn = math.cos(math.radians(ang)), math.sin(math.radians(ang))
        pts = [(cx + dx * c - dy * sn, cy + dx * sn + dy * c) for dx, dy in
               ((-s, -s), (s, -s), (s, s), (-s, s))]
        buildings.append(make_building(f"B{k}", pts))
    bmap = BuildingMap(tuple(buildings))
    assert len(facade_edges(bmap)) == sum(len(b.polygon) for b in bmap.buildings)
    xmin, ymin, xmax, ymax = bmap.bounds
    for b in bmap.buildings:
        for x, y in b.polygon:
            assert xmin <= x <= xmax and ymin <= y <= ymax
