"""Raster bundles: geotransform math, in-memory types and JSON+binary file I/O.

A bundle on disk is two files sharing a stem: ``<stem>.json`` holds the
metadata and ``<stem>.bin`` the raw little-endian payload, band-sequential and
row-major within each band.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GeoTransform",
    "Raster",
    "Mask",
    "RasterError",
    "pixel_to_world",
    "world_to_pixel",
    "load_raster",
    "save_raster",
    "load_mask",
    "save_mask",
]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class RasterError(ValueError):
    """Invalid raster metadata, payload or bundle file."""


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine georeferencing.

    ``origin_x``/``origin_y`` locate the top-left corner of pixel (0, 0);
    northing decreases as the row index grows.
    """

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    epsg: int

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise RasterError(
                f"pixel sizes must be positive, got ({self.pixel_size_x}, {self.pixel_size_y})"
            )
        if int(self.epsg) <= 0:
            raise RasterError(f"epsg must be a positive integer, got {self.epsg}")

    @property
    def gsd(self) -> float:
        """Ground sampling distance, assuming square pixels."""
        return self.pixel_size_x

    def offset(self, col: float, row: float) -> "GeoTransform":
        """Geotransform of a window whose top-left pixel is (col, row) here."""
        x, y = pixel_to_world(self, col, row)
        return replace(self, origin_x=x, origin_y=y)

    def with_pixel_size(self, size: float) -> "GeoTransform":
        return replace(self, pixel_size_x=size, pixel_size_y=size)

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size_x": self.pixel_size_x,
            "pixel_size_y": self.pixel_size_y,
        }


def pixel_to_world(geo: GeoTransform, col: float, row: float) -> tuple[float, float]:
    """Map fractional pixel coordinates to CRS coordinates."""
    x = geo.origin_x + col * geo.pixel_size_x
    y = geo.origin_y - row * geo.pixel_size_y
    return x, y


def world_to_pixel(geo: GeoTransform, x: float, y: float) -> tuple[float, float]:
    """Inverse of :func:`pixel_to_world`. Callers do their own bounds checks."""
    col = (x - geo.origin_x) / geo.pixel_size_x
    row = (geo.origin_y - y) / geo.pixel_size_y
    return col, row


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Raster:
    """Multi-band float32 image.

    ``data`` has shape ``(len(bands), height, width)``.
    """

    data: np.ndarray
    bands: tuple[str, ...]
    geo: GeoTransform
    nodata: float | None = None

    def __post_init__(self):
        bands = tuple(str(b) for b in self.bands)
        object.__setattr__(self, "bands", bands)
        if len(set(bands)) != len(bands):
            raise RasterError(f"band labels must be unique: {bands}")
        data = np.asarray(self.data)
        if data.ndim == 2 and len(bands) == 1:
            data = data[None]
        if data.ndim != 3:
            raise RasterError(f"raster data must be 3-D (bands, rows, cols), got {data.shape}")
        if data.shape[0] != len(bands):
            raise RasterError(
                f"data has {data.shape[0]} bands but {len(bands)} labels were given"
            )
        if data.shape[1] <= 0 or data.shape[2] <= 0:
            raise RasterError(f"raster dimensions must be positive, got {data.shape[1:]}")
        object.__setattr__(self, "data", _frozen(data.astype(np.float32, copy=False)))
        if self.nodata is not None:
            object.__setattr__(self, "nodata", float(np.float32(self.nodata)))

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    def band(self, label: str) -> np.ndarray:
        try:
            return self.data[self.bands.index(label)]
        except ValueError:
            raise KeyError(f"band {label!r} not in raster (have {list(self.bands)})") from None

    def select(self, labels: Sequence[str]) -> "Raster":
        return Raster(np.stack([self.band(b) for b in labels]), tuple(labels), self.geo, self.nodata)

    def with_data(self, data: np.ndarray, geo: GeoTransform | None = None) -> "Raster":
        return Raster(data, self.bands, geo or self.geo, self.nodata)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.geo == other.geo
            and self.nodata == other.nodata
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class Mask:
    """Binary label grid, uint8 values in {0, 1}, shape ``(height, width)``."""

    values: np.ndarray
    geo: GeoTransform
    label: str = field(default="WATER")

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or 0 in values.shape:
            raise RasterError(f"mask must be a non-empty 2-D grid, got shape {values.shape}")
        if values.dtype == bool:
            values = values.astype(np.uint8)
        if values.size and not np.isin(values, (0, 1)).all():
            raise RasterError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(values.astype(np.uint8, copy=False)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.geo == other.geo
            and self.label == other.label
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _bundle_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def _write_bundle(path, payload: np.ndarray, meta: dict) -> None:
    meta_path, bin_path = _bundle_paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(payload.tobytes())
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")


def _read_bundle(path) -> tuple[dict, np.ndarray]:
    meta_path, bin_path = _bundle_paths(path)
    for p in (meta_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"raster bundle file missing: {p}")
    meta = json.loads(meta_path.read_text())
    try:
        width, height = int(meta["width"]), int(meta["height"])
        bands = list(meta["bands"])
        dtype_name = meta["dtype"]
        gt = meta["geotransform"]
        geo = GeoTransform(
            float(gt["origin_x"]),
            float(gt["origin_y"]),
            float(gt["pixel_size_x"]),
            float(gt["pixel_size_y"]),
            int(meta["epsg"]),
        )
    except KeyError as exc:
        raise RasterError(f"{meta_path}: missing metadata field {exc}") from None
    if width <= 0 or height <= 0:
        raise RasterError(f"{meta_path}: non-positive dimensions {width}x{height}")
    if dtype_name not in _DTYPES:
        raise RasterError(f"{meta_path}: unknown dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    raw = bin_path.read_bytes()
    expected = width * height * len(bands) * dtype.itemsize
    if len(raw) != expected:
        raise RasterError(
            f"{bin_path}: payload is {len(raw)} bytes, metadata implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(len(bands), height, width)
    meta["_geo"] = geo
    return meta, arr


def save_raster(r: Raster, path) -> None:
    """Write ``r`` as a float32 bundle at ``path`` (extension optional)."""
    if r.width <= 0 or r.height <= 0:
        raise RasterError("refusing to write an empty raster")
    meta = {
        "width": r.width,
        "height": r.height,
        "bands": list(r.bands),
        "dtype": "f32",
        "geotransform": r.geo.to_dict(),
        "epsg": r.geo.epsg,
    }
    if r.nodata is not None:
        meta["nodata"] = r.nodata
    _write_bundle(path, r.data.astype("<f4", copy=False), meta)


def load_raster(path) -> Raster:
    meta, arr = _read_bundle(path)
    if meta["dtype"] != "f32":
        raise RasterError(f"expected an f32 raster bundle, got dtype {meta['dtype']!r}")
    return Raster(arr.astype(np.float32), tuple(meta["bands"]), meta["_geo"], meta.get("nodata"))


def save_mask(m: Mask, path) -> None:
    meta = {
        "width": m.width,
        "height": m.height,
        "bands": [m.label],
        "dtype": "u8",
        "geotransform": m.geo.to_dict(),
        "epsg": m.geo.epsg,
    }
    _write_bundle(path, m.values, meta)


def load_mask(path) -> Mask:
    meta, arr = _read_bundle(path)
    if meta["dtype"] != "u8" or len(meta["bands"]) != 1:
        raise RasterError("mask bundles hold exactly one u8 band")
    return Mask(arr[0].copy(), meta["_geo"], meta["bands"][0])


def square_gsd(geo: GeoTransform) -> float:
    if not math.isclose(geo.pixel_size_x, geo.pixel_size_y, rel_tol=1e-9):
        raise RasterError(
            f"square pixels required, got {geo.pixel_size_x} x {geo.pixel_size_y}"
        )
    return geo.pixel_size_x
