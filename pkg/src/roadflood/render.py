"""PNG overlays for eyeballing pipeline outputs."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .raster import Mask, Raster, world_to_pixel
from .roads import RoadNetwork


def _stretch(band: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(band, (2, 98))
    if hi <= lo:
        hi = lo + 1
    return (np.clip((band - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def render_overlay(
    raster: Raster | None,
    mask: Mask | None,
    roads: RoadNetwork | None = None,
    flooded=(),
    alpha: float = 0.45,
) -> Image.Image:
    """RGB composite (or grey) with water in blue, roads in red, flooded runs in yellow."""
    if raster is not None and mask is not None and raster.geo == mask.geo:
        # padded tiles are larger than the mosaicked mask; show the common extent
        h, w = min(raster.height, mask.height), min(raster.width, mask.width)
        raster = raster.with_data(raster.data[:, :h, :w])
        mask = Mask(mask.values[:h, :w], mask.geo)
    ref = raster if raster is not None else mask
    if ref is None:
        raise ValueError("need a raster or a mask to render")
    geo = ref.geo
    h, w = ref.height, ref.width
    if raster is not None and all(b in raster.bands for b in ("RED", "GREEN", "BLUE")):
        rgb = np.stack([_stretch(raster.band(b)) for b in ("RED", "GREEN", "BLUE")], axis=-1)
    else:
        rgb = np.full((h, w, 3), 96, dtype=np.uint8)
    img = rgb.astype(np.float32)
    if mask is not None:
        if (mask.width, mask.height) != (w, h):
            raise ValueError("mask and raster sizes differ")
        wet = mask.values.astype(bool)
        img[wet] = (1 - alpha) * img[wet] + alpha * np.array([30, 90, 255])
    out = Image.fromarray(img.astype(np.uint8))
    draw = ImageDraw.Draw(out)

    def to_px(coords):
        return [tuple(world_to_pixel(geo, x, y)) for x, y in coords]

    if roads is not None:
        for feat in roads.features:
            for line in feat.polylines:
                draw.line(to_px(line), fill=(220, 40, 40), width=2)
    for seg in flooded:
        draw.line(to_px(seg.coords), fill=(255, 220, 0), width=3)
    return out
