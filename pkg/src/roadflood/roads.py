"""Road polylines vs. water masks: GeoJSON in, flooded road segments out.

Each polyline is sampled at a fixed arc-length spacing (endpoints included);
a sample is wet when the mask pixel containing it is 1. Maximal runs of
consecutive wet samples become flooded segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .raster import Mask, world_to_pixel

GEOGRAPHIC_EPSG = {4326, 4269, 4258}
DEFAULT_TIMESTAMP = "1970-01-01T00:00:00Z"


class RoadError(ValueError):
    pass


@dataclass(frozen=True)
class RoadFeature:
    road_id: str
    polylines: tuple[np.ndarray, ...]
    properties: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RoadNetwork:
    features: tuple[RoadFeature, ...]
    epsg: int


@dataclass(frozen=True)
class FloodedSegment:
    road_id: str
    start: tuple[float, float]
    end: tuple[float, float]
    length_m: float
    sample_count: int
    timestamp: str
    coords: tuple[tuple[float, float], ...] = ()
    part: int = 0
    start_s: float = 0.0


def _polyline(coords, where: str) -> np.ndarray:
    try:
        arr = np.asarray(coords, dtype=np.float64)
    except (TypeError, ValueError):
        raise RoadError(f"{where}: malformed coordinates") from None
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise RoadError(f"{where}: a polyline needs at least 2 vertices")
    arr = arr[:, :2]
    if not np.isfinite(arr).all():
        raise RoadError(f"{where}: non-finite coordinate")
    return arr


def roads_from_geojson(doc: dict, id_key: str = "id", default_epsg: int | None = None) -> RoadNetwork:
    if doc.get("type") != "FeatureCollection":
        raise RoadError("expected a GeoJSON FeatureCollection")
    epsg = doc.get("epsg", default_epsg)
    if epsg is None:
        epsg = 4326  # RFC 7946 default CRS
    features = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if "coordinates" not in geom:
            raise RoadError(f"feature {i}: missing coordinates")
        if gtype == "LineString":
            parts = (_polyline(geom["coordinates"], f"feature {i}"),)
        elif gtype == "MultiLineString":
            parts = tuple(_polyline(c, f"feature {i} part {j}") for j, c in enumerate(geom["coordinates"]))
            if not parts:
                raise RoadError(f"feature {i}: empty MultiLineString")
        else:
            raise RoadError(f"feature {i}: unsupported geometry type {gtype!r}")
        props = dict(feat.get("properties") or {})
        rid = props.get(id_key, feat.get("id", i))
        features.append(RoadFeature(str(rid), parts, props))
    return RoadNetwork(tuple(features), int(epsg))


def load_roads(path, id_key: str = "id", default_epsg: int | None = None) -> RoadNetwork:
    """Read LineString/MultiLineString features from a GeoJSON FeatureCollection.

    The CRS comes from a top-level ``"epsg"`` member when present.
    """
    with open(path) as fh:
        doc = json.load(fh)
    return roads_from_geojson(doc, id_key, default_epsg)


def sample_polyline(vertices: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Points every ``spacing`` units of arc length, plus the final vertex.

    Returns (arc positions, (n, 2) coordinates).
    """
    seg = np.hypot(*np.diff(vertices, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(0.0, total, spacing) if total > 0 else np.zeros(1)
    if total > 0 and (len(s) == 0 or total - s[-1] > 1e-9 * max(total, 1.0)):
        s = np.append(s, total)
    x = np.interp(s, cum, vertices[:, 0])
    y = np.interp(s, cum, vertices[:, 1])
    return s, np.column_stack([x, y])


def classify_points(mask: Mask, pts: np.ndarray) -> np.ndarray:
    """True where the containing mask pixel is 1; points off the raster are dry."""
    col, row = world_to_pixel(mask.geo, pts[:, 0], pts[:, 1])
    ci = np.floor(col).astype(np.int64)
    ri = np.floor(row).astype(np.int64)
    inside = (ci >= 0) & (ci < mask.width) & (ri >= 0) & (ri < mask.height)
    wet = np.zeros(len(pts), dtype=bool)
    wet[inside] = mask.values[ri[inside], ci[inside]] == 1
    return wet


def wet_runs(wet: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (first, last) index pairs of maximal True runs."""
    padded = np.concatenate([[False], wet, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def intersect(
    mask: Mask,
    roads: RoadNetwork,
    sample_spacing_m: float | None = None,
    min_run_m: float | None = None,
    timestamp: str = DEFAULT_TIMESTAMP,
    meters_per_unit: float | None = None,
) -> list[FloodedSegment]:
    """Flooded stretches of every road polyline.

    ``sample_spacing_m`` defaults to half the mask GSD and ``min_run_m`` to
    three spacings. A run's length is the arc length between its first and
    last wet sample; runs shorter than ``min_run_m`` (or of zero length) are
    dropped. Results are ordered by road id, then by position along the road.
    """
    if roads.epsg != mask.geo.epsg:
        raise RoadError(f"CRS mismatch: roads EPSG:{roads.epsg} vs mask EPSG:{mask.geo.epsg}")
    gsd = mask.geo.pixel_size_x
    if not gsd > 0:
        raise RoadError("mask has zero ground sampling distance")
    if meters_per_unit is None:
        if mask.geo.epsg in GEOGRAPHIC_EPSG:
            raise RoadError(
                "geographic coordinates need an explicit meters_per_unit for length computations"
            )
        meters_per_unit = 1.0
    gsd_m = gsd * meters_per_unit
    spacing_m = sample_spacing_m if sample_spacing_m is not None else gsd_m / 2
    if not spacing_m > 0:
        raise RoadError("sample spacing must be positive")
    if min_run_m is None:
        min_run_m = 3 * spacing_m
    spacing = spacing_m / meters_per_unit

    out = []
    for feat in roads.features:
        for part, verts in enumerate(feat.polylines):
            s, pts = sample_polyline(verts, spacing)
            wet = classify_points(mask, pts)
            for a, b in wet_runs(wet):
                length_m = (s[b] - s[a]) * meters_per_unit
                if length_m <= 0 or length_m < min_run_m:
                    continue
                coords = tuple((float(x), float(y)) for x, y in pts[a : b + 1])
                out.append(
                    FloodedSegment(
                        road_id=feat.road_id,
                        start=coords[0],
                        end=coords[-1],
                        length_m=float(length_m),
                        sample_count=b - a + 1,
                        timestamp=timestamp,
                        coords=coords,
                        part=part,
                        start_s=float(s[a]),
                    )
                )
    out.sort(key=lambda seg: (seg.road_id, seg.part, seg.start_s))
    return out


def segments_to_geojson(segments, epsg: int) -> dict[str, Any]:
    features = []
    for seg in segments:
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [list(c) for c in seg.coords]},
                "properties": {
                    "road_id": seg.road_id,
                    "length_m": seg.length_m,
                    "timestamp": seg.timestamp,
                    "sample_count": seg.sample_count,
                },
            }
        )
    return {"type": "FeatureCollection", "epsg": int(epsg), "features": features}


def write_flooded_geojson(segments, path, epsg: int) -> None:
    """Write segments as a FeatureCollection in the mask CRS (``"epsg"`` member)."""
    doc = segments_to_geojson(segments, epsg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def roads_to_geojson(roads: RoadNetwork) -> dict[str, Any]:
    features = []
    for feat in roads.features:
        if len(feat.polylines) == 1:
            geom = {"type": "LineString", "coordinates": feat.polylines[0].tolist()}
        else:
            geom = {"type": "MultiLineString", "coordinates": [p.tolist() for p in feat.polylines]}
        props = {**feat.properties, "id": feat.road_id}
        features.append({"type": "Feature", "geometry": geom, "properties": props})
    return {"type": "FeatureCollection", "epsg": roads.epsg, "features": features}


def total_length(roads: RoadNetwork) -> float:
    return float(
        sum(np.hypot(*np.diff(p, axis=0).T).sum() for f in roads.features for p in f.polylines)
    )


def flooded_length(segments) -> float:
    return math.fsum(s.length_m for s in segments)
