"""NDWI segmentation, 256x256 chipping, synthetic annotated scenes and area stats."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .raster import (
    GeoTransform,
    Mask,
    Raster,
    load_mask,
    load_raster,
    save_mask,
    save_raster,
)

CHIP_SIZE = 256
CHIP_BANDS = ("RED", "GREEN", "BLUE", "NDWI")
SCENE_BANDS = ("RED", "GREEN", "BLUE", "NIR")
NDWI_THRESHOLD = 0.01

DEFAULT_WATER_LEVELS = {"RED": 0.08, "GREEN": 0.30, "BLUE": 0.12, "NIR": 0.05}
DEFAULT_LAND_LEVELS = {"RED": 0.15, "GREEN": 0.20, "BLUE": 0.10, "NIR": 0.40}


def ndwi(green, nir) -> np.ndarray:
    """(GREEN - NIR) / (GREEN + NIR), with 0/0 defined as 0 and clamped to [-1, 1]."""
    g = np.asarray(green, dtype=np.float64)
    n = np.asarray(nir, dtype=np.float64)
    if g.shape != n.shape:
        raise ValueError(f"GREEN {g.shape} and NIR {n.shape} grids differ in shape")
    den = g + n
    safe = np.where(den == 0, 1.0, den)
    out = np.where(den == 0, 0.0, (g - n) / safe)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def threshold_mask(ndwi_grid, threshold: float = NDWI_THRESHOLD, geo: GeoTransform | None = None):
    """Water where NDWI is strictly above ``threshold``.

    Returns a :class:`Mask` when ``geo`` is given, else the raw uint8 grid.
    """
    values = (np.asarray(ndwi_grid) > threshold).astype(np.uint8)
    return Mask(values, geo) if geo is not None else values


def area_hectares(mask, gsd: float) -> float:
    if not gsd > 0:
        raise ValueError("gsd must be positive")
    values = mask.values if isinstance(mask, Mask) else np.asarray(mask)
    return int(np.count_nonzero(values == 1)) * gsd * gsd / 10_000.0


@dataclass(frozen=True)
class Chip:
    """Model input tile, ``data`` is (256, 256, 4) in RED, GREEN, BLUE, NDWI order."""

    data: np.ndarray
    geo: GeoTransform
    tile_id: str = ""
    col_off: int = 0
    row_off: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != (CHIP_SIZE, CHIP_SIZE, len(CHIP_BANDS)):
            raise ValueError(f"chip data must be 256x256x4, got {data.shape}")
        nd = data[..., 3]
        if (nd < -1).any() or (nd > 1).any():
            raise ValueError("NDWI channel outside [-1, 1]")
        object.__setattr__(self, "data", data)

    def to_raster(self) -> Raster:
        return Raster(np.moveaxis(self.data, -1, 0), CHIP_BANDS, self.geo)

    @classmethod
    def from_raster(cls, r: Raster, tile_id: str = "", col_off: int = 0, row_off: int = 0) -> "Chip":
        stacked = np.stack([r.band(b) for b in CHIP_BANDS], axis=-1)
        return cls(stacked, r.geo, tile_id, col_off, row_off)


def extract_chips(
    tile_raster: Raster,
    mask: Mask | None = None,
    tile_id: str = "",
    extent: tuple[int, int] | None = None,
) -> list[tuple[Chip, Mask | None]]:
    """Cut non-overlapping 256x256 chips, discarding partial edge windows.

    ``extent`` is the (width, height) of valid pixels when the tile carries
    padding; chips never reach into the padded area.
    """
    missing = [b for b in ("RED", "GREEN", "BLUE", "NIR") if b not in tile_raster.bands]
    if missing:
        raise KeyError(f"tile lacks bands required for chipping: {missing}")
    if mask is not None and (mask.width, mask.height) != (tile_raster.width, tile_raster.height):
        raise ValueError("mask and tile dimensions differ")
    width, height = extent or (tile_raster.width, tile_raster.height)
    red, green, blue, nir = (tile_raster.band(b) for b in ("RED", "GREEN", "BLUE", "NIR"))
    chips = []
    for row in range(0, height - CHIP_SIZE + 1, CHIP_SIZE):
        for col in range(0, width - CHIP_SIZE + 1, CHIP_SIZE):
            win = np.s_[row : row + CHIP_SIZE, col : col + CHIP_SIZE]
            data = np.stack(
                [red[win], green[win], blue[win], ndwi(green[win], nir[win])], axis=-1
            )
            geo = tile_raster.geo.offset(col, row)
            label = Mask(mask.values[win], geo) if mask is not None else None
            chips.append((Chip(data, geo, tile_id, col, row), label))
    return chips


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, polygon: Sequence[Sequence[float]]) -> np.ndarray:
    """Even-odd containment test for many points against one polygon."""
    poly = np.asarray(polygon, dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    x1, y1 = poly[-1]
    for x2, y2 in poly:
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
        x1, y1 = x2, y2
    return inside


def rasterize_polygons(polygons, width: int, height: int) -> np.ndarray:
    """Pixel-centre rasterisation of pixel-space polygons into a uint8 grid."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = xs + 0.5, ys + 0.5
    out = np.zeros((height, width), dtype=bool)
    for i, poly in enumerate(polygons):
        if len(poly) < 3:
            raise ValueError(f"water polygon {i} has fewer than 3 vertices")
        out |= points_in_polygon(cx, cy, poly)
    return out.astype(np.uint8)


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    gsd: float = 10.0
    water_polygons: tuple = ()
    water_levels: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WATER_LEVELS))
    land_levels: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_LAND_LEVELS))
    noise_sigma: float = 0.0
    seed: int = 0
    origin_x: float = 0.0
    origin_y: float = 0.0
    epsg: int = 32643

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or not self.gsd > 0:
            raise ValueError("scene needs positive dimensions and gsd")
        w = ndwi(self.water_levels["GREEN"], self.water_levels["NIR"])
        l = ndwi(self.land_levels["GREEN"], self.land_levels["NIR"])
        if not (w > NDWI_THRESHOLD and l <= NDWI_THRESHOLD):
            raise ValueError(
                f"levels must separate at the NDWI threshold (water {float(w):.3f}, land {float(l):.3f})"
            )

    @property
    def geo(self) -> GeoTransform:
        return GeoTransform(self.origin_x, self.origin_y, self.gsd, self.gsd, self.epsg)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        kw = dict(d)
        kw["water_polygons"] = tuple(tuple(map(tuple, p)) for p in d.get("water_polygons", ()))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "gsd": self.gsd,
            "water_polygons": [[list(v) for v in p] for p in self.water_polygons],
            "water_levels": dict(self.water_levels),
            "land_levels": dict(self.land_levels),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "epsg": self.epsg,
        }


def generate_scene(spec: SceneSpec) -> tuple[Raster, Mask]:
    """Render a RED/GREEN/BLUE/NIR reflectance scene and its ground-truth mask."""
    truth = rasterize_polygons(spec.water_polygons, spec.width, spec.height)
    rng = np.random.default_rng(spec.seed)
    wet = truth.astype(bool)
    bands = []
    for b in SCENE_BANDS:
        band = np.where(wet, spec.water_levels[b], spec.land_levels[b])
        if spec.noise_sigma > 0:
            band = band + rng.normal(0.0, spec.noise_sigma, size=band.shape)
        bands.append(band)
    geo = spec.geo
    return Raster(np.stack(bands).astype(np.float32), SCENE_BANDS, geo), Mask(truth, geo)


def random_blob(cx: float, cy: float, radius: float, rng: np.random.Generator, n: int = 16):
    """Star-shaped lake outline around (cx, cy)."""
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = radius * rng.uniform(0.6, 1.0, n)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


def random_scene_spec(
    width: int,
    height: int,
    gsd: float = 10.0,
    n_lakes: int = 6,
    n_rivers: int = 1,
    noise_sigma: float = 0.01,
    seed: int = 0,
    **kw,
) -> SceneSpec:
    """Scatter lakes and straight river strips over a land background."""
    rng = np.random.default_rng(seed)
    polys = []
    scale = min(width, height)
    for _ in range(n_lakes):
        r = rng.uniform(0.04, 0.12) * scale
        polys.append(random_blob(rng.uniform(0, width), rng.uniform(0, height), r, rng))
    for _ in range(n_rivers):
        half = rng.uniform(0.01, 0.025) * scale
        y0, y1 = rng.uniform(0, height, 2)
        polys.append([(-1, y0 - half), (width + 1, y1 - half), (width + 1, y1 + half), (-1, y0 + half)])
    return SceneSpec(
        width=width,
        height=height,
        gsd=gsd,
        water_polygons=tuple(tuple(map(tuple, p)) for p in polys),
        noise_sigma=noise_sigma,
        seed=seed,
        **kw,
    )


def write_chip_dataset(
    pairs: Sequence[tuple[Chip, Mask | None]], out_dir, manifest_name: str = "manifest.json"
) -> Path:
    """Save chips (and labels, when present) plus a manifest listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for chip, label in pairs:
        stem = f"{chip.tile_id or 'chip'}_c{chip.col_off:05d}_r{chip.row_off:05d}"
        save_raster(chip.to_raster(), out_dir / stem)
        entry = {
            "chip": f"{stem}",
            "label": None,
            "tile_id": chip.tile_id,
            "col_off": chip.col_off,
            "row_off": chip.row_off,
        }
        if label is not None:
            save_mask(label, out_dir / f"{stem}_label")
            entry["label"] = f"{stem}_label"
        entries.append(entry)
    path = out_dir / manifest_name
    path.write_text(json.dumps({"chips": entries}, indent=2) + "\n")
    return path


def read_chip_dataset(manifest) -> list[tuple[Chip, Mask | None]]:
    manifest = Path(manifest)
    entries = json.loads(manifest.read_text())["chips"]
    out = []
    for e in entries:
        r = load_raster(manifest.parent / e["chip"])
        chip = Chip.from_raster(r, e.get("tile_id", ""), e.get("col_off", 0), e.get("row_off", 0))
        label = load_mask(manifest.parent / e["label"]) if e.get("label") else None
        if label is not None and (label.height, label.width) != chip.data.shape[:2]:
            raise ValueError(f"label for {e['chip']} does not match chip size")
        out.append((chip, label))
    return out


def stack_dataset(pairs) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack chips into (N, H, W, 4) inputs and (N, H, W, 1) float targets."""
    x = np.stack([c.data for c, _ in pairs])
    if any(m is None for _, m in pairs):
        return x, None
    y = np.stack([m.values for _, m in pairs]).astype(np.float32)[..., None]
    return x, y
