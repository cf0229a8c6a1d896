"""Batch inference latency, reported per image and per square kilometre."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .water import CHIP_SIZE


@dataclass(frozen=True)
class BenchReport:
    runs: list[float]
    batch_size: int
    warmup: int
    chip_size: int
    chip_gsd_m: float

    @property
    def mean_run_s(self) -> float:
        return statistics.fmean(self.runs)

    @property
    def mean_per_image_s(self) -> float:
        return self.mean_run_s / self.batch_size

    @property
    def per_image_s(self) -> list[float]:
        return [r / self.batch_size for r in self.runs]

    @property
    def chip_area_km2(self) -> float:
        return chip_area_km2(self.chip_gsd_m, self.chip_size)

    @property
    def ms_per_sqkm(self) -> float:
        return ms_per_sqkm(self.mean_per_image_s, self.chip_gsd_m, self.chip_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            mean_run_s=self.mean_run_s,
            mean_per_image_s=self.mean_per_image_s,
            per_image_s=self.per_image_s,
            chip_area_km2=self.chip_area_km2,
            ms_per_sqkm=self.ms_per_sqkm,
        )
        return d


def chip_area_km2(gsd_m: float, chip_size: int = CHIP_SIZE) -> float:
    side_km = chip_size * gsd_m / 1000.0
    return side_km * side_km


def ms_per_sqkm(per_image_s: float, gsd_m: float, chip_size: int = CHIP_SIZE) -> float:
    return 1000.0 * per_image_s / chip_area_km2(gsd_m, chip_size)


def bench_infer(
    infer: Callable[[np.ndarray], np.ndarray],
    chips: np.ndarray | Sequence,
    batch: int = 8,
    runs: int = 5,
    warmup: int = 1,
    gsd_m: float = 4.75,
    timer: Callable[[], float] = time.perf_counter,
) -> BenchReport:
    """Time ``runs`` passes of ``infer`` over the same batch of chips.

    ``warmup`` untimed passes come first. ``timer`` is any monotonic clock in
    seconds; tests inject a fake one.
    """
    chips = np.asarray(chips)
    if chips.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) chips, got shape {chips.shape}")
    if len(chips) < batch:
        raise ValueError(f"need at least {batch} chips, got {len(chips)}")
    if chips.shape[1] != chips.shape[2]:
        raise ValueError("chips must be square")
    xb = chips[:batch]
    for _ in range(warmup):
        infer(xb)
    times = []
    for _ in range(runs):
        t0 = timer()
        infer(xb)
        times.append(timer() - t0)
    return BenchReport(times, batch, warmup, chips.shape[1], gsd_m)
