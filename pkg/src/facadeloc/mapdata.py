"""Building footprint maps in a local east-north metric frame.

A map file is UTF-8 JSON::

    {"origin": {"lat": 40.0, "lon": -75.0},
     "buildings": [{"id": "A", "name": "Hall", "polygon": [[0.0, 0.0], ...]}]}

Vertices are meters east (x) and north (y) of ``origin``.  Polygons are
stored open (the closing vertex is implicit) and normalized to
counter-clockwise order on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from shapely.geometry import LinearRing

EARTH_RADIUS_M = 6378137.0


class FormatError(ValueError):
    """An input file could not be parsed."""


class ValidationError(ValueError):
    """An input parsed but violates a domain invariant."""


Point = tuple[float, float]


@dataclass(frozen=True)
class Building:
    id: str
    polygon: tuple[Point, ...]
    name: Optional[str] = None

    @property
    def area(self) -> float:
        return signed_area(self.polygon)


@dataclass(frozen=True)
class FacadeEdge:
    building: str
    p0: Point
    p1: Point
    direction_angle: float  # degrees in [0, 180), CCW from east

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])


@dataclass(frozen=True)
class BuildingMap:
    buildings: tuple[Building, ...]
    origin: tuple[float, float] = (0.0, 0.0)  # (lat, lon)
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = [b.id for b in self.buildings]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate building id(s): {', '.join(dup)}")
        object.__setattr__(self, "_index", {b.id: b for b in self.buildings})

    def __getitem__(self, building_id: str) -> Building:
        return self._index[building_id]

    def __contains__(self, building_id: str) -> bool:
        return building_id in self._index

    def __len__(self) -> int:
        return len(self.buildings)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.buildings]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) over all vertices; zeros for an empty map."""
        if not self.buildings:
            return (0.0, 0.0, 0.0, 0.0)
        pts = np.array([p for b in self.buildings for p in b.polygon])
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))


def signed_area(polygon: Sequence[Point]) -> float:
    pts = np.asarray(polygon, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def edge_direction_angle(p0: Point, p1: Point) -> float:
    """Undirected angle of the line through p0, p1 in [0, 180) degrees."""
    ang = math.degrees(math.atan2(p1[1] - p0[1], p1[0] - p0[0])) % 180.0
    # fmod can return 180.0 for tiny negative inputs
    return 0.0 if ang >= 180.0 else ang


def make_building(building_id: str, polygon: Iterable[Sequence[float]],
                  name: Optional[str] = None) -> Building:
    """Validate a footprint and return it in CCW order."""
    if not isinstance(building_id, str) or not building_id:
        raise ValidationError(f"building id must be a non-empty string, got {building_id!r}")
    try:
        raw = [tuple(p) for p in polygon]
        pts = [(float(x), float(y)) for x, y in raw]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"building {building_id}: vertices must be [x, y] number pairs") from exc
    if len(pts) < 3:
        raise ValidationError(f"building {building_id}: polygon needs >= 3 vertices")
    if not all(math.isfinite(c) for p in pts for c in p):
        raise ValidationError(f"building {building_id}: non-finite coordinate")
    for a, b in zip(pts, pts[1:] + pts[:1]):
        if a == b:
            raise ValidationError(f"building {building_id}: consecutive duplicate vertex {a}")
    area = signed_area(pts)
    if abs(area) <= 1e-12:
        raise ValidationError(f"building {building_id}: degenerate polygon (zero area)")
    if not LinearRing(pts).is_simple:
        raise ValidationError(f"building {building_id}: polygon self-intersects")
    if area < 0:
        pts = [pts[0]] + pts[:0:-1]
    return Building(id=building_id, polygon=tuple(pts), name=name)


def facade_edges(bmap: BuildingMap) -> list[FacadeEdge]:
    """One edge per polygon side, in building order then vertex order."""
    edges = []
    for b in bmap.buildings:
        poly = b.polygon
        for i, p0 in enumerate(poly):
            p1 = poly[(i + 1) % len(poly)]
            edges.append(FacadeEdge(b.id, p0, p1, edge_direction_angle(p0, p1)))
    return edges


def edge_arrays(bmap: BuildingMap) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Edges as arrays for vectorized projection.

    Returns ``(segments, building_index, ids)`` with ``segments`` of shape
    (E, 2, 2) holding p0/p1 and ``building_index`` indexing into ``ids``.
    """
    ids = bmap.ids
    segs, bidx = [], []
    for k, b in enumerate(bmap.buildings):
        poly = np.asarray(b.polygon, dtype=float)
        segs.append(np.stack([poly, np.roll(poly, -1, axis=0)], axis=1))
        bidx.append(np.full(len(poly), k))
    if not segs:
        return np.zeros((0, 2, 2)), np.zeros(0, dtype=int), ids
    return np.concatenate(segs), np.concatenate(bidx), ids


def point_in_polygon(x: np.ndarray, y: np.ndarray, polygon: Sequence[Point]) -> np.ndarray:
    """Strict interior test (boundary points are outside), vectorized over points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        within = ((np.minimum(x0, x1) - 1e-9 <= x) & (x <= np.maximum(x0, x1) + 1e-9)
                  & (np.minimum(y0, y1) - 1e-9 <= y) & (y <= np.maximum(y0, y1) + 1e-9))
        on_edge |= (np.abs(cross) <= 1e-9 * max(1.0, math.hypot(x1 - x0, y1 - y0))) & within
        straddle = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddle & (x < xint)
    return inside & ~on_edge


# -- file format --------------------------------------------------------------

def map_to_dict(bmap: BuildingMap) -> dict:
    buildings = []
    for b in bmap.buildings:
        entry: dict = {"id": b.id}
        if b.name is not None:
            entry["name"] = b.name
        entry["polygon"] = [[x, y] for x, y in b.polygon]
        buildings.append(entry)
    return {"origin": {"lat": bmap.origin[0], "lon": bmap.origin[1]}, "buildings": buildings}


def map_from_dict(doc: dict) -> BuildingMap:
    if not isinstance(doc, dict) or "buildings" not in doc:
        raise FormatError("map file must be an object with a 'buildings' list")
    origin = doc.get("origin", {"lat": 0.0, "lon": 0.0})
    try:
        lat, lon = float(origin["lat"]), float(origin["lon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("map origin must be {lat, lon}") from exc
    raw = doc["buildings"]
    if not isinstance(raw, list):
        raise FormatError("'buildings' must be a list")
    buildings = []
    for entry in raw:
        if not isinstance(entry, dict) or "id" not in entry or "polygon" not in entry:
            raise FormatError("each building needs 'id' and 'polygon'")
        if not isinstance(entry["polygon"], list):
            raise FormatError(f"building {entry['id']}: polygon must be a list")
        buildings.append(make_building(entry["id"], entry["polygon"], entry.get("name")))
    return BuildingMap(tuple(buildings), origin=(lat, lon))


def dumps_map(bmap: BuildingMap) -> str:
    return json.dumps(map_to_dict(bmap), indent=2, ensure_ascii=False) + "\n"


def save_map(bmap: BuildingMap, path) -> None:
    Path(path).write_text(dumps_map(bmap), encoding="utf-8")


def load_map(path) -> BuildingMap:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return map_from_dict(doc)


# -- GeoJSON conversion -------------------------------------------------------

def lonlat_to_local(lon: float, lat: float, origin: tuple[float, float]) -> Point:
    """Equirectangular projection about ``origin`` = (lat, lon)."""
    lat0, lon0 = origin
    x = math.radians(lon - lon0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    y = math.radians(lat - lat0) * EARTH_RADIUS_M
    return (x, y)


def map_from_geojson(doc: dict, origin: Optional[tuple[float, float]] = None) -> BuildingMap:
    """Convert a FeatureCollection of lon/lat Polygons carrying an ``id`` property.

    Without an explicit origin the center of the lon/lat bounding box is used.
    Multi-polygons and polygons with holes are rejected.
    """
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise FormatError("expected a GeoJSON FeatureCollection")
    rings = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        fid = props.get("id", feat.get("id"))
        if fid is None:
            raise FormatError("feature without an 'id' property")
        if geom.get("type") != "Polygon":
            raise ValidationError(f"building {fid}: only Polygon geometries are supported, got {geom.get('type')}")
        coords = geom.get("coordinates") or []
        if len(coords) != 1:
            raise ValidationError(f"building {fid}: polygons with holes are not supported")
        ring = [tuple(map(float, c[:2])) for c in coords[0]]
        if len(ring) > 1 and ring[0] == ring[-1]:
            ring = ring[:-1]
        rings.append((str(fid), ring, props.get("name")))
    if origin is None:
        if rings:
            lons = [p[0] for _, r, _ in rings for p in r]
            lats = [p[1] for _, r, _ in rings for p in r]
            origin = ((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)
        else:
            origin = (0.0, 0.0)
    buildings = [make_building(fid, [lonlat_to_local(lon, lat, origin) for lon, lat in ring], name)
                 for fid, ring, name in rings]
    return BuildingMap(tuple(buildings), origin=origin)


def convert_geojson(src, dst, origin: Optional[tuple[float, float]] = None) -> BuildingMap:
    try:
        doc = json.loads(Path(src).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{src}: invalid JSON ({exc.msg})") from exc
    bmap = map_from_geojson(doc, origin)
    save_map(bmap, dst)
    return bmap
