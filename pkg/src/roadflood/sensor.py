"""Pushbroom-style L1C simulator chain.

Stages run in this order: bicubic resampling to the target GSD, random band
misalignment, PSF convolution, radiance-to-reflectance scaling, tiling.
Every stage is a pure function of its inputs and, for misalignment, a seed.
Interpolation and convolution are carried out in float64 and rounded back to
float32 once per stage, which keeps constant images exactly constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .raster import GeoTransform, Raster, RasterError, square_gsd

__all__ = [
    "PsfSpec",
    "SolarGeometry",
    "SimConfig",
    "MisalignmentReport",
    "TileIndex",
    "cubic_kernel",
    "resample_bicubic",
    "shift_band",
    "draw_shifts",
    "misalign_bands",
    "apply_psf",
    "radiance_to_reflectance",
    "reflectance_to_radiance",
    "tile",
    "simulate",
    "DEFAULT_ESUN",
]

# Sentinel-2A mean solar exoatmospheric irradiance, W m-2 um-1.
DEFAULT_ESUN = {"BLUE": 1959.72, "GREEN": 1824.93, "RED": 1512.79, "NIR": 1036.39}

KEYS_A = -0.5


def cubic_kernel(t, a: float = KEYS_A):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _taps(coords: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamped source indices and kernel weights, shape (4, len(coords))."""
    base = np.floor(coords).astype(np.int64)
    offsets = np.arange(-1, 3)[:, None]
    idx = base[None, :] + offsets
    w = cubic_kernel(coords[None, :] - idx)
    return np.clip(idx, 0, n - 1), w


def _interp_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    idx, w = _taps(coords, a.shape[axis])
    out = None
    for k in range(4):
        taken = np.take(a, idx[k], axis=axis)
        shape = [1] * a.ndim
        shape[axis] = -1
        term = taken * w[k].reshape(shape)
        out = term if out is None else out + term
    return out


def _interp2d(band: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    tmp = _interp_axis(np.asarray(band, dtype=np.float64), rows, axis=0)
    return _interp_axis(tmp, cols, axis=1)


def resample_bicubic(r: Raster, target_gsd: float) -> Raster:
    """Resample every band to ``target_gsd`` metres per pixel.

    Output size is ``floor(dim * source_gsd / target_gsd)``; output pixel
    centres are mapped back onto the source grid and sampled with the Keys
    kernel, clamping source indices at the edges.
    """
    if not target_gsd > 0:
        raise ValueError(f"target_gsd must be positive, got {target_gsd}")
    source_gsd = square_gsd(r.geo)
    ratio = source_gsd / target_gsd
    out_w = int(math.floor(r.width * ratio + 1e-9))
    out_h = int(math.floor(r.height * ratio + 1e-9))
    if out_w <= 0 or out_h <= 0:
        raise RasterError(f"resampling to {target_gsd} m leaves an empty raster")
    cols = (np.arange(out_w) + 0.5) / ratio - 0.5
    rows = (np.arange(out_h) + 0.5) / ratio - 0.5
    data = np.stack([_interp2d(b, rows, cols) for b in r.data]).astype(np.float32)
    return r.with_data(data, r.geo.with_pixel_size(target_gsd))


def shift_band(band: np.ndarray, dx_px: float, dy_px: float) -> np.ndarray:
    """Translate a band by a sub-pixel offset; +dx moves content to higher columns."""
    h, w = band.shape
    rows = np.arange(h) - dy_px
    cols = np.arange(w) - dx_px
    return _interp2d(band, rows, cols).astype(np.float32)


@dataclass(frozen=True)
class PsfSpec:
    """Either an explicit odd square kernel or a Gaussian description."""

    kernel: np.ndarray | None = None
    sigma_px: float = 1.0
    radius_px: int = 3

    def weights(self) -> np.ndarray:
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=np.float64)
        else:
            if self.sigma_px <= 0 or self.radius_px < 0:
                raise ValueError("gaussian PSF needs sigma_px > 0 and radius_px >= 0")
            ax = np.arange(-self.radius_px, self.radius_px + 1, dtype=np.float64)
            k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * self.sigma_px**2))
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"PSF kernel must be an odd-sized square grid, got {k.shape}")
        if (k < 0).any() or not np.isfinite(k).all():
            raise ValueError("PSF weights must be finite and non-negative")
        total = k.sum()
        if total <= 0:
            raise ValueError("PSF kernel is all zero")
        return k / total

    @classmethod
    def identity(cls) -> "PsfSpec":
        return cls(kernel=np.ones((1, 1)))

    @classmethod
    def from_dict(cls, d: Mapping) -> "PsfSpec":
        if "kernel" in d:
            return cls(kernel=np.asarray(d["kernel"], dtype=np.float64))
        g = d.get("gaussian", d)
        return cls(sigma_px=float(g.get("sigma_px", 1.0)), radius_px=int(g.get("radius_px", 3)))

    def to_dict(self) -> dict:
        if self.kernel is not None:
            return {"kernel": np.asarray(self.kernel).tolist()}
        return {"gaussian": {"sigma_px": self.sigma_px, "radius_px": self.radius_px}}


@dataclass(frozen=True)
class SolarGeometry:
    esun_per_band: Mapping[str, float] | Sequence[float] = field(
        default_factory=lambda: dict(DEFAULT_ESUN)
    )
    sun_zenith_deg: float = 30.0
    earth_sun_dist_au: float = 1.0

    def validate(self) -> None:
        if not 0 <= self.sun_zenith_deg < 90:
            raise ValueError(f"sun zenith must lie in [0, 90), got {self.sun_zenith_deg}")
        if not self.earth_sun_dist_au > 0:
            raise ValueError("earth-sun distance must be positive")
        values = (
            self.esun_per_band.values()
            if isinstance(self.esun_per_band, Mapping)
            else self.esun_per_band
        )
        if any(not e > 0 for e in values):
            raise ValueError("every solar irradiance value must be positive")

    def esun_for(self, bands: Sequence[str]) -> np.ndarray:
        if isinstance(self.esun_per_band, Mapping):
            missing = [b for b in bands if b not in self.esun_per_band]
            if missing:
                raise ValueError(f"no solar irradiance given for bands {missing}")
            return np.array([self.esun_per_band[b] for b in bands], dtype=np.float64)
        esun = np.asarray(self.esun_per_band, dtype=np.float64)
        if esun.shape != (len(bands),):
            raise ValueError(f"{len(esun)} irradiance values given for {len(bands)} bands")
        return esun

    def factors(self, bands: Sequence[str]) -> np.ndarray:
        """Per-band multiplier turning radiance into reflectance."""
        self.validate()
        cos_sz = math.cos(math.radians(self.sun_zenith_deg))
        return math.pi * self.earth_sun_dist_au**2 / (self.esun_for(bands) * cos_sz)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SolarGeometry":
        esun = d.get("esun_per_band", DEFAULT_ESUN)
        return cls(
            esun_per_band=dict(esun) if isinstance(esun, Mapping) else list(esun),
            sun_zenith_deg=float(d.get("sun_zenith_deg", 30.0)),
            earth_sun_dist_au=float(d.get("earth_sun_dist_au", 1.0)),
        )

    def to_dict(self) -> dict:
        esun = self.esun_per_band
        return {
            "esun_per_band": dict(esun) if isinstance(esun, Mapping) else list(esun),
            "sun_zenith_deg": self.sun_zenith_deg,
            "earth_sun_dist_au": self.earth_sun_dist_au,
        }


@dataclass(frozen=True)
class SimConfig:
    source_gsd: float = 10.0
    target_gsd: float = 4.75
    reference_band: str = "GREEN"
    misalign_sigma: float = 4.75
    psf: PsfSpec = field(default_factory=PsfSpec)
    solar: SolarGeometry = field(default_factory=SolarGeometry)
    tile_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not (self.source_gsd > 0 and self.target_gsd > 0):
            raise ValueError("GSDs must be positive")
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        if self.misalign_sigma < 0:
            raise ValueError("misalign_sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        kw = {k: d[k] for k in ("source_gsd", "target_gsd", "misalign_sigma") if k in d}
        kw = {k: float(v) for k, v in kw.items()}
        if "reference_band" in d:
            kw["reference_band"] = str(d["reference_band"])
        if "tile_size" in d:
            kw["tile_size"] = int(d["tile_size"])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "psf" in d:
            kw["psf"] = PsfSpec.from_dict(d["psf"])
        if "solar" in d:
            kw["solar"] = SolarGeometry.from_dict(d["solar"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "source_gsd": self.source_gsd,
            "target_gsd": self.target_gsd,
            "reference_band": self.reference_band,
            "misalign_sigma": self.misalign_sigma,
            "psf": self.psf.to_dict(),
            "solar": self.solar.to_dict(),
            "tile_size": self.tile_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MisalignmentReport:
    """Applied shifts in metres, (dx along columns, dy along rows)."""

    shifts: dict[str, tuple[float, float]]
    reference_band: str

    @property
    def rmse(self) -> float:
        others = [v for b, v in self.shifts.items() if b != self.reference_band]
        if not others:
            return 0.0
        return math.sqrt(sum(dx * dx + dy * dy for dx, dy in others) / len(others))

    def to_dict(self) -> dict:
        return {
            "reference_band": self.reference_band,
            "shifts_m": {b: [dx, dy] for b, (dx, dy) in self.shifts.items()},
            "rmse_m": self.rmse,
        }


def draw_shifts(
    bands: Sequence[str], reference_band: str, sigma: float, rng: np.random.Generator
) -> dict[str, tuple[float, float]]:
    """Draw one shift vector per band, in band order.

    Magnitudes are ``|N(0, sigma)|`` metres, directions uniform on the circle.
    The reference band gets (0, 0) and consumes no draws.
    """
    shifts = {}
    for b in bands:
        if b == reference_band:
            shifts[b] = (0.0, 0.0)
            continue
        m = abs(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
        theta = rng.uniform(0.0, 2 * math.pi)
        shifts[b] = (m * math.cos(theta), m * math.sin(theta))
    return shifts


def misalign_bands(
    r: Raster,
    cfg: SimConfig,
    shifts: Mapping[str, tuple[float, float]] | None = None,
) -> tuple[Raster, MisalignmentReport]:
    """Shift each non-reference band by a random sub-pixel vector.

    ``shifts`` overrides the random draw (metres per band); bands absent from
    it are left in place.
    """
    if cfg.reference_band not in r.bands:
        raise KeyError(f"reference band {cfg.reference_band!r} not in raster {list(r.bands)}")
    if shifts is None:
        rng = np.random.default_rng(cfg.seed)
        shifts = draw_shifts(r.bands, cfg.reference_band, cfg.misalign_sigma, rng)
    else:
        shifts = {b: tuple(map(float, shifts.get(b, (0.0, 0.0)))) for b in r.bands}
        shifts[cfg.reference_band] = (0.0, 0.0)
    gsd = square_gsd(r.geo)
    out = []
    for label, band in zip(r.bands, r.data):
        dx, dy = shifts[label]
        if dx == 0 and dy == 0:
            out.append(band)
        else:
            out.append(shift_band(band, dx / gsd, dy / gsd))
    report = MisalignmentReport(dict(shifts), cfg.reference_band)
    return r.with_data(np.stack(out)), report


def apply_psf(r: Raster, psf: PsfSpec) -> Raster:
    """Convolve each band with the normalised PSF, mirror-padding the edges.

    Padding repeats the edge pixel (``d c b a | a b c d``).
    """
    k = psf.weights()
    rad = k.shape[0] // 2
    if rad == 0:
        return r.with_data(r.data * np.float32(k[0, 0]))
    flipped = k[::-1, ::-1]
    h, w = r.height, r.width
    out = []
    for band in r.data:
        padded = np.pad(band.astype(np.float64), rad, mode="symmetric")
        acc = np.zeros((h, w))
        for i in range(k.shape[0]):
            for j in range(k.shape[1]):
                acc += flipped[i, j] * padded[i : i + h, j : j + w]
        out.append(acc)
    return r.with_data(np.stack(out).astype(np.float32))


def radiance_to_reflectance(r: Raster, solar: SolarGeometry) -> Raster:
    """Top-of-atmosphere reflectance: pi * L * d^2 / (E_sun * cos(sun_zenith))."""
    f = solar.factors(r.bands)
    return r.with_data((r.data * f[:, None, None]).astype(np.float32))


def reflectance_to_radiance(r: Raster, solar: SolarGeometry) -> Raster:
    """Inverse of :func:`radiance_to_reflectance`; used to synthesise at-sensor inputs."""
    f = solar.factors(r.bands)
    return r.with_data((r.data / f[:, None, None]).astype(np.float32))


@dataclass(frozen=True)
class TileIndex:
    tile_row: int
    tile_col: int
    col_off: int
    row_off: int
    valid_width: int
    valid_height: int
    padded: bool

    @property
    def tile_id(self) -> str:
        return f"r{self.tile_row:03d}_c{self.tile_col:03d}"

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "tile_row": self.tile_row,
            "tile_col": self.tile_col,
            "col_off": self.col_off,
            "row_off": self.row_off,
            "valid_width": self.valid_width,
            "valid_height": self.valid_height,
            "padded": self.padded,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TileIndex":
        return cls(**{k: d[k] for k in (
            "tile_row", "tile_col", "col_off", "row_off", "valid_width", "valid_height", "padded"
        )})


def tile(r: Raster, tile_size: int) -> list[tuple[Raster, TileIndex]]:
    """Cut ``r`` into a row-major grid of ``tile_size`` squares, zero-padding edges."""
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    tiles = []
    for tr, row_off in enumerate(range(0, r.height, tile_size)):
        for tc, col_off in enumerate(range(0, r.width, tile_size)):
            vh = min(tile_size, r.height - row_off)
            vw = min(tile_size, r.width - col_off)
            padded = vh < tile_size or vw < tile_size
            window = r.data[:, row_off : row_off + vh, col_off : col_off + vw]
            if padded:
                buf = np.zeros((len(r.bands), tile_size, tile_size), dtype=np.float32)
                buf[:, :vh, :vw] = window
                window = buf
            idx = TileIndex(tr, tc, col_off, row_off, vw, vh, padded)
            tiles.append((r.with_data(window, r.geo.offset(col_off, row_off)), idx))
    return tiles


def simulate(r: Raster, cfg: SimConfig) -> tuple[list[tuple[Raster, TileIndex]], MisalignmentReport]:
    """Run the full simulator chain on a radiance raster."""
    gsd = square_gsd(r.geo)
    if not math.isclose(gsd, cfg.source_gsd, rel_tol=1e-9):
        raise RasterError(f"input pixel size {gsd} m does not match source_gsd {cfg.source_gsd} m")
    out = resample_bicubic(r, cfg.target_gsd)
    out, report = misalign_bands(out, cfg)
    out = apply_psf(out, cfg.psf)
    out = radiance_to_reflectance(out, cfg.solar)
    return tile(out, cfg.tile_size), report
