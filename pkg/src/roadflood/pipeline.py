"""File-based pipeline stages and the end-to-end driver.

Every stage reads its inputs from disk and writes its outputs to disk, so each
can run on its own (see ``roadflood.cli``) or be chained by :func:`run_pipeline`.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import modelopt, roads as roadmod
from .bench import bench_infer
from .raster import GeoTransform, Mask, load_mask, load_raster, save_mask, save_raster
from .segnet.model import ModelConfig, forward
from .segnet.train import TrainConfig, train
from .sensor import SimConfig, TileIndex, reflectance_to_radiance, simulate
from .water import (
    CHIP_SIZE,
    Chip,
    SceneSpec,
    extract_chips,
    generate_scene,
    ndwi,
    random_scene_spec,
    rasterize_polygons,
    read_chip_dataset,
    stack_dataset,
    threshold_mask,
    write_chip_dataset,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


# -- synthetic inputs -------------------------------------------------------


def scene_polygons_world(spec: SceneSpec) -> list[list[tuple[float, float]]]:
    geo = spec.geo
    return [
        [(geo.origin_x + c * geo.pixel_size_x, geo.origin_y - r * geo.pixel_size_y) for c, r in poly]
        for poly in spec.water_polygons
    ]


def truth_on_grid(spec: SceneSpec, geo: GeoTransform, width: int, height: int) -> Mask:
    """Rasterise the planted water polygons onto an arbitrary grid (pixel centres)."""
    polys = []
    for poly in scene_polygons_world(spec):
        polys.append([((x - geo.origin_x) / geo.pixel_size_x, (geo.origin_y - y) / geo.pixel_size_y) for x, y in poly])
    return Mask(rasterize_polygons(polys, width, height), geo)


def random_roads(spec: SceneSpec, n_roads: int = 4, seed: int = 0) -> roadmod.RoadNetwork:
    """Roads crossing the scene edge to edge with one interior bend each."""
    rng = np.random.default_rng(seed)
    geo = spec.geo
    w_m, h_m = spec.width * spec.gsd, spec.height * spec.gsd
    feats = []
    for i in range(n_roads):
        if i % 2 == 0:
            ys = rng.uniform(0.05, 0.95, 3) * h_m
            verts = [(0.0, ys[0]), (rng.uniform(0.3, 0.7) * w_m, ys[1]), (w_m, ys[2])]
        else:
            xs = rng.uniform(0.05, 0.95, 3) * w_m
            verts = [(xs[0], 0.0), (xs[1], rng.uniform(0.3, 0.7) * h_m), (xs[2], h_m)]
        world = np.array([(geo.origin_x + x, geo.origin_y - y) for x, y in verts])
        feats.append(roadmod.RoadFeature(f"road-{i:02d}", (world,), {"name": f"road {i}"}))
    return roadmod.RoadNetwork(tuple(feats), geo.epsg)


def stage_synth(spec: SceneSpec, sim_cfg: SimConfig, out_dir, n_roads: int = 4, road_seed: int = 0) -> dict:
    """Planted scene (as at-sensor radiance), its truth mask and a road network."""
    out_dir = Path(out_dir)
    refl, truth = generate_scene(spec)
    save_raster(reflectance_to_radiance(refl, sim_cfg.solar), out_dir / "scene")
    save_mask(truth, out_dir / "truth")
    write_json(spec.to_dict(), out_dir / "scene_spec.json")
    net = random_roads(spec, n_roads, road_seed)
    write_json(roadmod.roads_to_geojson(net), out_dir / "roads.geojson")
    return {"scene": str(out_dir / "scene"), "truth": str(out_dir / "truth"), "roads": str(out_dir / "roads.geojson")}


# -- simulator / chipping ---------------------------------------------------


def stage_simulate(scene_path, sim_cfg: SimConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    tiles, report = simulate(load_raster(scene_path), sim_cfg)
    index = []
    for r, idx in tiles:
        save_raster(r, out_dir / idx.tile_id)
        index.append(idx.to_dict())
    write_json({"tiles": index, "config": sim_cfg.to_dict()}, out_dir / "index.json")
    write_json(report.to_dict(), out_dir / "misalignment.json")
    return {"tiles": len(tiles), "rmse_m": report.rmse}


def _tiles(tiles_dir) -> list[tuple[Path, TileIndex]]:
    tiles_dir = Path(tiles_dir)
    index = read_json(tiles_dir / "index.json")["tiles"]
    return [(tiles_dir / t["tile_id"], TileIndex.from_dict(t)) for t in index]


def stage_chip(tiles_dir, out_dir, scene_spec: SceneSpec | None = None, labels: str = "truth") -> dict:
    """Cut chips from every tile; ``labels`` is "truth", "ndwi" or "none"."""
    pairs = []
    for path, idx in _tiles(tiles_dir):
        tile_r = load_raster(path)
        mask = None
        if labels == "truth":
            if scene_spec is None:
                raise ValueError("truth labels need the scene spec")
            # padding carries no imagery, so only the valid extent gets planted water
            values = np.zeros((tile_r.height, tile_r.width), np.uint8)
            valid = truth_on_grid(scene_spec, tile_r.geo, idx.valid_width, idx.valid_height).values
            values[: idx.valid_height, : idx.valid_width] = valid
            mask = Mask(values, tile_r.geo)
        elif labels == "ndwi":
            mask = threshold_mask(ndwi(tile_r.band("GREEN"), tile_r.band("NIR")), geo=tile_r.geo)
        elif labels != "none":
            raise ValueError(f"unknown label source {labels!r}")
        pairs += extract_chips(tile_r, mask, idx.tile_id, (idx.valid_width, idx.valid_height))
    manifest = write_chip_dataset(pairs, out_dir)
    return {"chips": len(pairs), "manifest": str(manifest)}


# -- model stages -----------------------------------------------------------


def stage_train(manifest, model_out, model_cfg: ModelConfig, train_cfg: TrainConfig, report_out=None) -> dict:
    pairs = read_chip_dataset(manifest)
    x, y = stack_dataset(pairs)
    if y is None:
        raise ValueError("training chips need labels")
    params, report = train(x, y, model_cfg, train_cfg)
    modelopt.save_model(model_cfg, params, model_out, "f32")
    if report_out:
        report.to_json(report_out)
        report.to_csv(Path(report_out).with_suffix(".csv"))
    last = report.epochs[-1] if report.epochs else {}
    return {"model": str(model_out), "epochs": len(report.epochs), "final": last}


def stage_prune(model_in, manifest, model_out, sched: modelopt.PruneSchedule, train_cfg: TrainConfig) -> dict:
    cfg, params = modelopt.load_inference_params(model_in)
    x, y = stack_dataset(read_chip_dataset(manifest))
    params, _ = modelopt.prune_finetune(params, x, y, cfg, sched, train_cfg)
    modelopt.save_model(cfg, params, model_out, "sparse")
    return modelopt.size_report(cfg, params)


def stage_quantize(model_in, model_out) -> dict:
    cfg, params = modelopt.load_inference_params(model_in)
    modelopt.save_model(cfg, modelopt.quantize_params(params), model_out, "q8")
    return modelopt.size_report(cfg, params)


def make_predictor(model_path=None, threshold: float = 0.5):
    """Chip batch -> binary masks, either from a model file or the NDWI rule."""
    if model_path is None:
        def predict(xb):
            return threshold_mask(np.asarray(xb)[..., 3])
        return predict
    cfg, params = modelopt.load_inference_params(model_path)

    def predict(xb):
        return (forward(params, cfg, xb)[..., 0] >= threshold).astype(np.uint8)
    return predict


def stage_infer(tiles_dir, out_dir, model_path=None, threads: int = 1) -> dict:
    """Predict each chip of each tile and mosaic into one scene-wide mask.

    Pixels not covered by a full chip are left dry. Chips are predicted one at
    a time, so thread count never changes the numbers.
    """
    predict = make_predictor(model_path)
    tiles = _tiles(tiles_dir)
    width = max(i.col_off + i.valid_width for _, i in tiles)
    height = max(i.row_off + i.valid_height for _, i in tiles)
    mosaic = np.zeros((height, width), dtype=np.uint8)
    origin_geo = None
    for path, idx in tiles:
        tile_r = load_raster(path)
        if idx.col_off == 0 and idx.row_off == 0:
            origin_geo = tile_r.geo
        chips = extract_chips(tile_r, None, idx.tile_id, (idx.valid_width, idx.valid_height))

        def run(chip: Chip):
            return predict(chip.data[None])[0]

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                preds = list(pool.map(run, [c for c, _ in chips]))
        else:
            preds = [run(c) for c, _ in chips]
        for (chip, _), pred in zip(chips, preds):
            r0, c0 = idx.row_off + chip.row_off, idx.col_off + chip.col_off
            mosaic[r0 : r0 + CHIP_SIZE, c0 : c0 + CHIP_SIZE] = pred
    mask = Mask(mosaic, origin_geo)
    save_mask(mask, Path(out_dir) / "water_mask")
    gsd = origin_geo.pixel_size_x
    return {"mask": str(Path(out_dir) / "water_mask"), "water_ha": int(mosaic.sum()) * gsd * gsd / 1e4}


def stage_intersect(mask_path, roads_path, out_path, timestamp=roadmod.DEFAULT_TIMESTAMP, **opts) -> dict:
    mask = load_mask(mask_path)
    net = roadmod.load_roads(roads_path)
    segs = roadmod.intersect(mask, net, timestamp=timestamp, **opts)
    roadmod.write_flooded_geojson(segs, out_path, mask.geo.epsg)
    return {"segments": len(segs), "flooded_m": roadmod.flooded_length(segs)}


def stage_bench(model_path, manifest, batch: int = 8, runs: int = 5, warmup: int = 1) -> dict:
    cfg, params = modelopt.load_inference_params(model_path)
    pairs = read_chip_dataset(manifest)
    x, _ = stack_dataset(pairs)
    if len(x) < batch:
        x = np.concatenate([x] * math.ceil(batch / len(x)))
    gsd = pairs[0][0].geo.pixel_size_x
    report = bench_infer(lambda xb: forward(params, cfg, xb), x, batch, runs, warmup, gsd)
    return report.to_dict()


# -- end to end -------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "workdir": "run",
    "seed": 0,
    "scene": {"random": {"width": 512, "height": 512, "gsd": 10.0, "n_lakes": 6, "n_rivers": 1,
                         "noise_sigma": 0.005}},
    "roads": {"n_roads": 4},
    "sim": {},
    "infer": {"mode": "baseline"},
    "intersect": {},
    "timestamp": roadmod.DEFAULT_TIMESTAMP,
}


def _merge(base: Mapping, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) else v
    return out


def resolve_config(config: Mapping, seed: int | None = None) -> dict:
    cfg = _merge(DEFAULT_CONFIG, config)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _scene_spec(cfg: Mapping) -> SceneSpec:
    scene = cfg["scene"]
    seed = int(cfg["seed"])
    if "random" in scene:
        kw = dict(scene["random"])
        kw.setdefault("seed", seed)
        return random_scene_spec(**kw)
    return SceneSpec.from_dict({"seed": seed, **scene})


def run_pipeline(config: Mapping, seed: int | None = None, threads: int = 1) -> dict:
    """synth -> simulate -> chip -> [train -> prune -> quantize] -> infer -> intersect."""
    cfg = resolve_config(config, seed)
    work = Path(cfg["workdir"])
    seed = int(cfg["seed"])
    summary: dict = {"workdir": str(work), "seed": seed}

    def run(name, fn, *a, **kw):
        try:
            out = fn(*a, **kw)
        except Exception as exc:
            raise StageError(name, exc) from exc
        log.info("%s: %s", name, out)
        summary[name] = out
        return out

    try:
        spec = _scene_spec(cfg)
    except Exception as exc:
        raise StageError("scene", exc) from exc
    summary["scene"] = spec.to_dict()
    sim_cfg = replace(SimConfig.from_dict(cfg["sim"]), source_gsd=spec.gsd)
    if "seed" not in cfg["sim"]:
        sim_cfg = replace(sim_cfg, seed=seed + 1)
    run("synth", stage_synth, spec, sim_cfg, work / "scene", cfg["roads"].get("n_roads", 4), seed + 2)
    run("simulate", stage_simulate, work / "scene" / "scene", sim_cfg, work / "tiles")
    run("chip", stage_chip, work / "tiles", work / "chips", spec, "truth")

    model_path = None
    infer_cfg = cfg["infer"]
    if infer_cfg.get("mode", "baseline") == "model":
        model_cfg = ModelConfig.from_dict(infer_cfg.get("model", {}))
        train_cfg = TrainConfig.from_dict({"seed": seed, **infer_cfg.get("train", {})})
        manifest = work / "chips" / "manifest.json"
        model_path = work / "models" / "model_f32.rfpm"
        run("train", stage_train, manifest, model_path, model_cfg, train_cfg, work / "models" / "train_report.json")
        if "prune" in infer_cfg:
            pr = infer_cfg["prune"]
            sched = modelopt.PruneSchedule.from_dict(pr.get("schedule", {}))
            ptrain = TrainConfig.from_dict({"seed": seed, "epochs": 2, **pr.get("train", {})})
            pruned = work / "models" / "model_sparse.rfpm"
            run("prune", stage_prune, model_path, manifest, pruned, sched, ptrain)
            model_path = pruned
        if infer_cfg.get("quantize", False):
            quant = work / "models" / "model_q8.rfpm"
            run("quantize", stage_quantize, model_path, quant)
            model_path = quant
    elif infer_cfg.get("mode") != "baseline":
        raise StageError("infer", ValueError(f"unknown infer mode {infer_cfg.get('mode')!r}"))

    run("infer", stage_infer, work / "tiles", work / "masks", model_path, threads)
    ix = cfg["intersect"]
    run(
        "intersect",
        stage_intersect,
        work / "masks" / "water_mask",
        work / "scene" / "roads.geojson",
        work / "flooded.geojson",
        cfg["timestamp"],
        **{k: ix[k] for k in ("sample_spacing_m", "min_run_m") if k in ix},
    )
    write_json(summary, work / "summary.json")
    return summary
