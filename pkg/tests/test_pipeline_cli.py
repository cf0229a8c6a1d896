import json
from pathlib import Path

import numpy as np
import pytest

from roadflood import cli, pipeline, roads
from roadflood.raster import Mask, load_mask
from roadflood.water import SceneSpec

SMALL_SCENE = {"random": {"width": 270, "height": 270, "gsd": 10.0, "n_lakes": 3, "n_rivers": 1, "noise_sigma": 0.005}}


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("base")
    summary = pipeline.run_pipeline({"workdir": str(work)})
    return work, summary


def _files(work: Path, pattern):
    return {p.relative_to(work).as_posix(): p.read_bytes() for p in sorted(work.glob(pattern))}


def test_baseline_matches_planted_intersection(baseline_run):
    work, summary = baseline_run
    mask = load_mask(work / "masks" / "water_mask")
    spec = SceneSpec.from_dict(json.loads((work / "scene" / "scene_spec.json").read_text()))
    truth = pipeline.truth_on_grid(spec, mask.geo, mask.width, mask.height).values
    # the baseline only labels pixels covered by full chips
    covered = np.zeros_like(truth)
    covered[:1024, :1024] = 1
    planted = Mask(truth * covered, mask.geo)
    net = roads.load_roads(work / "scene" / "roads.geojson")
    expected = roads.intersect(planted, net)
    doc = json.loads((work / "flooded.geojson").read_text())
    got = doc["features"]
    assert len(expected) > 0
    assert [f["properties"]["road_id"] for f in got] == [s.road_id for s in expected]
    tol = 2 * mask.geo.pixel_size_x
    for f, s in zip(got, expected):
        coords = f["geometry"]["coordinates"]
        assert np.hypot(*np.subtract(coords[0], s.start)) <= tol
        assert np.hypot(*np.subtract(coords[-1], s.end)) <= tol
        assert abs(f["properties"]["length_m"] - s.length_m) <= 2 * tol
    assert summary["intersect"]["segments"] == len(got)


def test_baseline_outputs_deterministic(baseline_run, tmp_path):
    work, _ = baseline_run
    pipeline.run_pipeline({"workdir": str(tmp_path)})
    for pattern in ("masks/*", "flooded.geojson", "tiles/*", "chips/*"):
        assert _files(work, pattern) == _files(tmp_path, pattern), pattern


def test_threads_do_not_change_mask(baseline_run, tmp_path):
    work, _ = baseline_run
    pipeline.stage_infer(work / "tiles", tmp_path, threads=3)
    assert (tmp_path / "water_mask.bin").read_bytes() == (work / "masks" / "water_mask.bin").read_bytes()


def test_stage_error_names_stage(tmp_path):
    with pytest.raises(pipeline.StageError, match="infer"):
        pipeline.run_pipeline({"workdir": str(tmp_path), "scene": SMALL_SCENE, "infer": {"mode": "magic"}})


# CLI


def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_missing_config_is_usage_error(tmp_path, capsys):
    code, _, err = run_cli(["run", "--config", tmp_path / "nope.json"], capsys)
    assert code == 2 and "not found" in err
    code, _, err = run_cli(["run"], capsys)
    assert code == 2


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code != 0


def test_stage_failure_exit_status(tmp_path, capsys):
    code, _, err = run_cli(["intersect", tmp_path / "missing", tmp_path / "roads.geojson", "--geojson", tmp_path / "o.geojson"], capsys)
    assert code == 1 and err


def test_cli_stage_chain(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "scene": SMALL_SCENE,
        "model": {"levels": 2, "base_filters": 4},
        "train": {"epochs": 1, "validation_fraction": 0},
        "schedule": {"end_step": 1},  # one prune step: 4 chips, batch 8, 1 epoch
    }))
    scene, tiles, chips, masks = (tmp_path / d for d in ("scene", "tiles", "chips", "masks"))

    code, out, _ = run_cli(["synth", "--config", cfg, "--seed", 3, "--out-dir", scene], capsys)
    assert code == 0 and json.loads(out)["roads"].endswith("roads.geojson")
    code, out, _ = run_cli(["simulate", scene / "scene", "--seed", 4, "--out-dir", tiles], capsys)
    assert code == 0 and json.loads(out)["tiles"] == 1
    code, out, _ = run_cli(["chip", tiles, "--out-dir", chips, "--scene-spec", scene / "scene_spec.json", "--labels", "truth"], capsys)
    assert code == 0 and json.loads(out)["chips"] == 4
    manifest = chips / "manifest.json"

    code, out, _ = run_cli(["train", manifest, "--config", cfg, "--model", tmp_path / "m.rfpm", "--report", tmp_path / "rep.json"], capsys)
    assert code == 0 and (tmp_path / "rep.csv").exists()
    code, out, _ = run_cli(["prune", tmp_path / "m.rfpm", manifest, "--config", cfg, "--model", tmp_path / "p.rfpm"], capsys)
    assert code == 0 and json.loads(out)["global_sparsity"] >= 0.8
    code, out, _ = run_cli(["quantize", tmp_path / "p.rfpm", "--model", tmp_path / "q.rfpm"], capsys)
    assert code == 0
    code, out, _ = run_cli(["report-size", tmp_path / "q.rfpm", "--out", tmp_path / "size.json"], capsys)
    size = json.loads((tmp_path / "size.json").read_text())
    assert code == 0 and out == ""
    assert size["payload_bytes"]["quantized_i8"] * 4 == size["payload_bytes"]["dense_f32"]
    assert size["file_size"] == (tmp_path / "q.rfpm").stat().st_size

    code, out, _ = run_cli(["bench", tmp_path / "q.rfpm", manifest, "--batch", 2, "--runs", 2, "--warmup", 1], capsys)
    rep = json.loads(out)
    assert code == 0 and len(rep["runs"]) == 2 and rep["chip_area_km2"] == pytest.approx(1.478656)

    code, _, err = run_cli(["infer", tiles, "--out-dir", masks], capsys)
    assert code == 2 and "baseline" in err
    code, out, _ = run_cli(["infer", tiles, "--out-dir", masks, "--baseline", "ndwi-threshold"], capsys)
    assert code == 0
    code, out, _ = run_cli(["infer", tiles, "--out-dir", tmp_path / "mmask", "--model", tmp_path / "q.rfpm", "--threads", 2], capsys)
    assert code == 0

    code, out, _ = run_cli(["intersect", masks / "water_mask", scene / "roads.geojson", "--geojson", tmp_path / "f.geojson",
                            "--timestamp", "2024-05-01T06:00:00Z"], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "f.geojson").read_text())
    assert doc["type"] == "FeatureCollection"
    assert all(f["properties"]["timestamp"] == "2024-05-01T06:00:00Z" for f in doc["features"])
    assert json.loads(out)["segments"] == len(doc["features"])

    code, _, _ = run_cli(["render", "--raster", tiles / "r000_c000", "--mask", masks / "water_mask", "--roads",
                          scene / "roads.geojson", "--flooded", tmp_path / "f.geojson", "--png", tmp_path / "o.png"], capsys)
    assert code == 0 and (tmp_path / "o.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_cli_run_writes_summary(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scene": SMALL_SCENE}))
    code, out, _ = run_cli(["run", "--config", cfg, "--workdir", tmp_path / "w", "--seed", 5], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "w" / "summary.json").read_text())
    assert summary["seed"] == 5 and json.loads(out)["seed"] == 5
