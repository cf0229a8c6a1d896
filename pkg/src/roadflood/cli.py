"""Command-line entry point: ``roadflood <subcommand> ...``.

Stage configs are JSON files passed with ``--config``; reports go to stdout as
JSON, or to ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import modelopt, pipeline, roads as roadmod
from .raster import load_mask, load_raster
from .segnet.model import ModelConfig
from .segnet.train import TrainConfig
from .sensor import SimConfig
from .water import SceneSpec

log = logging.getLogger("roadflood")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from None


def cmd_synth(args, cfg):
    cfg = pipeline.resolve_config(cfg, args.seed)
    spec = pipeline._scene_spec(cfg)
    sim_cfg = SimConfig.from_dict(cfg["sim"])
    return pipeline.stage_synth(spec, sim_cfg, args.out_dir, cfg["roads"].get("n_roads", 4), cfg["seed"] + 2)


def cmd_simulate(args, cfg):
    sim_cfg = SimConfig.from_dict(cfg)
    if args.seed is not None:
        sim_cfg = replace(sim_cfg, seed=args.seed)
    return pipeline.stage_simulate(args.scene, sim_cfg, args.out_dir)


def cmd_chip(args, cfg):
    spec = SceneSpec.from_dict(pipeline.read_json(args.scene_spec)) if args.scene_spec else None
    return pipeline.stage_chip(args.tiles, args.out_dir, spec, args.labels)


def cmd_train(args, cfg):
    tcfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg["seed"] = args.seed
    return pipeline.stage_train(
        args.manifest, args.model, ModelConfig.from_dict(cfg.get("model", {})),
        TrainConfig.from_dict(tcfg), args.report,
    )


def cmd_prune(args, cfg):
    tcfg = {"epochs": 2, **cfg.get("train", {})}
    if args.seed is not None:
        tcfg["seed"] = args.seed
    sched = modelopt.PruneSchedule.from_dict(cfg.get("schedule", {}))
    return pipeline.stage_prune(args.model_in, args.manifest, args.model, sched, TrainConfig.from_dict(tcfg))


def cmd_quantize(args, cfg):
    return pipeline.stage_quantize(args.model_in, args.model)


def cmd_infer(args, cfg):
    if args.model is None and args.baseline is None:
        raise UsageError("infer needs --model or --baseline ndwi-threshold")
    return pipeline.stage_infer(args.tiles, args.out_dir, args.model, args.threads)


def cmd_intersect(args, cfg):
    opts = {k: cfg[k] for k in ("sample_spacing_m", "min_run_m") if k in cfg}
    if args.spacing is not None:
        opts["sample_spacing_m"] = args.spacing
    if args.min_run is not None:
        opts["min_run_m"] = args.min_run
    return pipeline.stage_intersect(args.mask, args.roads, args.geojson, args.timestamp, **opts)


def cmd_bench(args, cfg):
    return pipeline.stage_bench(args.model_in, args.manifest, args.batch, args.runs, args.warmup)


def cmd_report_size(args, cfg):
    mcfg, params = modelopt.load_inference_params(args.model_in)
    report = modelopt.size_report(mcfg, params)
    report["file_size"] = Path(args.model_in).stat().st_size
    return report


def cmd_render(args, cfg):
    from .render import render_overlay

    raster = load_raster(args.raster) if args.raster else None
    mask = load_mask(args.mask) if args.mask else None
    net = roadmod.load_roads(args.roads) if args.roads else None
    flooded = ()
    if args.flooded:
        doc = json.loads(Path(args.flooded).read_text())
        flooded = [
            roadmod.FloodedSegment(
                f["properties"]["road_id"], (0, 0), (0, 0), f["properties"]["length_m"],
                f["properties"]["sample_count"], f["properties"]["timestamp"],
                tuple(map(tuple, f["geometry"]["coordinates"])),
            )
            for f in doc["features"]
        ]
    render_overlay(raster, mask, net, flooded).save(args.png)
    return {"png": args.png}


def cmd_run(args, cfg):
    if args.workdir:
        cfg = {**cfg, "workdir": args.workdir}
    return pipeline.run_pipeline(cfg, args.seed, args.threads)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every stage seed")
    common.add_argument("--threads", type=int, default=1, help="chip-level inference threads")
    common.add_argument("--config", default=None, help="stage config JSON file")
    common.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roadflood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "planted synthetic scene, truth mask and roads")
    p.add_argument("--out-dir", required=True)
    p = add("simulate", cmd_simulate, "run the L1C simulator chain on a radiance raster")
    p.add_argument("scene")
    p.add_argument("--out-dir", required=True)
    p = add("chip", cmd_chip, "cut 256x256 RGB+NDWI chips from simulated tiles")
    p.add_argument("tiles")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scene-spec", default=None)
    p.add_argument("--labels", choices=("truth", "ndwi", "none"), default="ndwi")
    p = add("train", cmd_train, "train the segmentation network on a chip manifest")
    p.add_argument("manifest")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--report", default=None, help="per-epoch metrics JSON (CSV alongside)")
    p = add("prune", cmd_prune, "scheduled magnitude pruning with fine-tuning")
    p.add_argument("model_in")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p = add("quantize", cmd_quantize, "int8 post-training quantization")
    p.add_argument("model_in")
    p.add_argument("--model", required=True)
    p = add("infer", cmd_infer, "predict a scene-wide water mask from tiles")
    p.add_argument("tiles")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", choices=("ndwi-threshold",), default=None)
    p = add("intersect", cmd_intersect, "flooded road segments as GeoJSON")
    p.add_argument("mask")
    p.add_argument("roads")
    p.add_argument("--geojson", required=True)
    p.add_argument("--spacing", type=float, default=None, help="sample spacing, metres")
    p.add_argument("--min-run", type=float, default=None, help="shortest reported run, metres")
    p.add_argument("--timestamp", default=roadmod.DEFAULT_TIMESTAMP)
    p = add("bench", cmd_bench, "batch inference latency")
    p.add_argument("model_in")
    p.add_argument("manifest")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p = add("report-size", cmd_report_size, "byte counts under every model encoding")
    p.add_argument("model_in")
    p = add("render", cmd_render, "PNG overlay of raster, mask and roads")
    p.add_argument("--raster", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--roads", default=None)
    p.add_argument("--flooded", default=None)
    p.add_argument("--png", required=True)
    p = add("run", cmd_run, "end-to-end pipeline")
    p.add_argument("--workdir", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        if args.command == "run" and args.config is None:
            raise UsageError("run requires --config")
        result = args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"roadflood: error: {exc}", file=sys.stderr)
        return 2
    except pipeline.StageError as exc:
        print(f"roadflood: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"roadflood {args.command}: {exc}", file=sys.stderr)
        return 1
    text = json.dumps(result, indent=2, sort_keys=True, default=str)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
