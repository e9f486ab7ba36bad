import json
import os
import subprocess

import numpy as np
import pytest
from click.testing import CliRunner

from fragpose import fileio
from fragpose.cli import main
from fragpose.fragments import fragment_model
from fragpose.geometry import CameraIntrinsics, Pose
from fragpose.harness import PrimitiveSpec, generate_primitive
from fragpose.metrics import e_mssd


def write_ascii_ply(path, model):
    lines = ["ply", "format ascii 1.0",
             f"element vertex {len(model.vertices)}",
             "property float x", "property float y", "property float z",
             f"element face {len(model.triangles)}",
             "property list uchar int vertex_indices", "end_header"]
    for v in model.vertices:
        lines.append(" ".join(repr(float(x)) for x in v))
    for t in model.triangles:
        lines.append("3 " + " ".join(str(int(i)) for i in t))
    path.write_text("\n".join(lines) + "\n")


def small_camera():
    return CameraIntrinsics(fx=200.0, fy=200.0, cx=80.0, cy=60.0,
                            width=160, height=120)


def box_models_dir(tmp_path, n_fragments=8, object_id=1):
    """Models directory holding one box with fragments and symmetries."""
    models = tmp_path / "models"
    models.mkdir(exist_ok=True)
    spec = PrimitiveSpec(kind="box", dimensions=(120.0, 100.0, 60.0),
                         object_id=object_id)
    mesh, symmetries = generate_primitive(spec)
    write_ascii_ply(models / f"obj_{object_id:06d}.ply", mesh)
    fileio.save_fragments(fragment_model(mesh, n_fragments),
                          models / f"frags_{object_id:06d}.json")
    fileio.save_symmetries(symmetries, models / f"sym_{object_id:06d}.json")
    return models, mesh, symmetries


def box_scene(tmp_path, poses=None, depth_path=""):
    if poses is None:
        poses = [Pose(np.eye(3), np.array([0.0, 0.0, 600.0]))]
    scene = fileio.SceneDescription(camera=small_camera(),
                                    instances=tuple((1, p) for p in poses),
                                    depth_path=depth_path)
    path = tmp_path / "scene.json"
    fileio.save_scene(scene, path)
    return path, scene


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def stderr_error(result):
    doc = json.loads(result.stderr.strip().splitlines()[-1])
    assert "error" in doc and "message" in doc
    return doc


def test_console_script_installed():
    out = subprocess.run(["fragpose", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("fragment", "simulate", "estimate", "evaluate", "render-debug"):
        assert command in out.stdout


def test_fragment_matches_library_oracle(tmp_path):
    models, mesh, _ = box_models_dir(tmp_path)
    out = tmp_path / "frags.json"
    result = invoke("fragment", "--model", models / "obj_000001.ply",
                    "--n", 4, "--out", out)
    assert result.exit_code == 0, result.output
    loaded = fileio.load_fragments(out, mesh)
    oracle = fragment_model(mesh, 4)
    assert np.array_equal(loaded.centers, oracle.centers)
    assert np.array_equal(loaded.vertex_fragment, oracle.vertex_fragment)


def test_fragment_default_count_is_64(tmp_path):
    spec = PrimitiveSpec(kind="cylinder-approx", dimensions=(40.0, 100.0),
                         object_id=3)
    mesh, _ = generate_primitive(spec)
    ply = tmp_path / "obj_000003.ply"
    write_ascii_ply(ply, mesh)
    out = tmp_path / "frags.json"
    result = invoke("fragment", "--model", ply, "--out", out)
    assert result.exit_code == 0, result.output
    loaded = fileio.load_fragments(out, mesh)
    # object id comes from the file name, fragment count from the default
    assert loaded.n_fragments == 64
    assert loaded.model.object_id == 3


def test_full_pipeline_clean_scene_perfect_recall(tmp_path):
    models, mesh, symmetries = box_models_dir(tmp_path)
    scene_path, scene = box_scene(tmp_path, depth_path="depth.png")
    field = tmp_path / "field.bin"
    results = tmp_path / "results.csv"
    report_path = tmp_path / "report.json"

    result = invoke("simulate", "--spec", scene_path, "--models", models,
                    "--out", field)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "depth.png").exists()

    result = invoke("estimate", "--field", field, "--models", models,
                    "--out", results)
    assert result.exit_code == 0, result.output
    rows = fileio.load_results(results)
    assert len(rows) == 1
    assert rows[0].obj_id == 1 and rows[0].score > 0.5
    error = e_mssd(rows[0].pose, scene.instances[0][1], mesh, symmetries)
    assert error < 0.01 * mesh.diameter

    result = invoke("evaluate", "--results", results, "--gt", scene_path,
                    "--models", models, "--out", report_path)
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text())
    assert report["overall"]["ar"] == 1.0
    assert report["per_object"]["1"]["n_gt"] == 1


def test_estimate_missing_model_errors(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    scene_path, _ = box_scene(tmp_path)
    field = tmp_path / "field.bin"
    assert invoke("simulate", "--spec", scene_path, "--models", models,
                  "--out", field).exit_code == 0

    empty = tmp_path / "empty"
    empty.mkdir()
    result = invoke("estimate", "--field", field, "--models", empty,
                    "--out", tmp_path / "r.csv")
    assert result.exit_code != 0
    assert stderr_error(result)["error"] == "ModelMismatchError"


def test_estimate_fragment_count_mismatch_errors(tmp_path):
    models, _, _ = box_models_dir(tmp_path, n_fragments=8)
    scene_path, _ = box_scene(tmp_path)
    field = tmp_path / "field.bin"
    assert invoke("simulate", "--spec", scene_path, "--models", models,
                  "--out", field).exit_code == 0

    other = tmp_path / "other"
    other.mkdir()
    box_models_dir(other, n_fragments=4)
    result = invoke("estimate", "--field", field, "--models", other / "models",
                    "--out", tmp_path / "r.csv")
    assert result.exit_code != 0
    doc = stderr_error(result)
    assert doc["error"] == "ModelMismatchError"
    assert "fragment" in doc["message"]


def test_malformed_scene_json_reports_parse_error(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    bad = tmp_path / "scene.json"
    bad.write_text("{broken")
    result = invoke("simulate", "--spec", bad, "--models", models,
                    "--out", tmp_path / "field.bin")
    assert result.exit_code != 0
    doc = stderr_error(result)
    assert doc["error"] == "ParseError"
    assert doc["path"].endswith("scene.json")


def corruption_file(tmp_path, **kwargs):
    path = tmp_path / "corruption.json"
    path.write_text(json.dumps(kwargs))
    return path


def test_seed_reproducibility(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    scene_path, _ = box_scene(tmp_path)
    corr = corruption_file(tmp_path, coord_noise_sigma=0.02, outlier_rate=0.3)

    fields = []
    for name in ("f1.bin", "f2.bin"):
        path = tmp_path / name
        assert invoke("simulate", "--spec", scene_path, "--corruption", corr,
                      "--models", models, "--seed", 11, "--out", path
                      ).exit_code == 0
        fields.append(path.read_bytes())
    assert fields[0] == fields[1]

    poses = []
    for name in ("r1.csv", "r2.csv"):
        path = tmp_path / name
        assert invoke("estimate", "--field", tmp_path / "f1.bin",
                      "--models", models, "--seed", 4, "--out", path
                      ).exit_code == 0
        rows = fileio.load_results(path)
        poses.append([(r.obj_id, r.score, r.pose.rotation.tolist(),
                       r.pose.translation.tolist()) for r in rows])
    assert poses[0] == poses[1]

    # a different corruption seed must actually change the field
    path = tmp_path / "f3.bin"
    assert invoke("simulate", "--spec", scene_path, "--corruption", corr,
                  "--models", models, "--seed", 12, "--out", path
                  ).exit_code == 0
    assert path.read_bytes() != fields[0]


def test_simulate_unknown_corruption_key(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    scene_path, _ = box_scene(tmp_path)
    corr = corruption_file(tmp_path, outlier_fraction=0.5)
    result = invoke("simulate", "--spec", scene_path, "--corruption", corr,
                    "--models", models, "--out", tmp_path / "field.bin")
    assert result.exit_code != 0
    assert stderr_error(result)["error"] == "ParseError"


def test_estimate_results_are_sorted(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    offsets = [np.array([-90.0, 0.0, 620.0]), np.array([90.0, 0.0, 580.0])]
    scene_path, _ = box_scene(tmp_path, poses=[Pose(np.eye(3), t) for t in offsets])
    field = tmp_path / "field.bin"
    assert invoke("simulate", "--spec", scene_path, "--models", models,
                  "--out", field).exit_code == 0
    results = tmp_path / "results.csv"
    assert invoke("estimate", "--field", field, "--models", models,
                  "--out", results).exit_code == 0
    rows = fileio.load_results(results)
    assert len(rows) == 2
    keys = [(r.scene_id, r.im_id, r.obj_id, -r.score) for r in rows]
    assert keys == sorted(keys)


def test_evaluate_multi_instance_recall(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    offsets = [np.array([-90.0, 0.0, 620.0]), np.array([90.0, 0.0, 580.0])]
    scene_path, _ = box_scene(tmp_path, poses=[Pose(np.eye(3), t) for t in offsets])
    field = tmp_path / "field.bin"
    results = tmp_path / "results.csv"
    report_path = tmp_path / "report.json"
    assert invoke("simulate", "--spec", scene_path, "--models", models,
                  "--out", field).exit_code == 0
    assert invoke("estimate", "--field", field, "--models", models,
                  "--out", results).exit_code == 0
    assert invoke("evaluate", "--results", results, "--gt", scene_path,
                  "--models", models, "--out", report_path).exit_code == 0
    report = json.loads(report_path.read_text())
    assert report["per_object"]["1"]["n_gt"] == 2
    assert report["overall"]["ar"] == 1.0


def test_render_debug_writes_images(tmp_path):
    models, _, _ = box_models_dir(tmp_path)
    scene_path, _ = box_scene(tmp_path)
    field = tmp_path / "field.bin"
    results = tmp_path / "results.csv"
    assert invoke("simulate", "--spec", scene_path, "--models", models,
                  "--out", field).exit_code == 0
    assert invoke("estimate", "--field", field, "--models", models,
                  "--out", results).exit_code == 0
    out_dir = tmp_path / "debug"
    result = invoke("render-debug", "--results", results, "--models", models,
                    "--scene", scene_path, "--out", out_dir)
    assert result.exit_code == 0, result.output
    names = sorted(os.listdir(out_dir))
    assert names == ["depth_000001_000001.png", "mask_000001_000001.png"]
    depth = fileio.load_depth_png(out_dir / names[0])
    assert (depth > 0).any()


def test_simulate_auto_fragments_missing_decomposition(tmp_path):
    models = tmp_path / "models"
    models.mkdir()
    spec = PrimitiveSpec(kind="box", dimensions=(120.0, 100.0, 60.0), object_id=1)
    mesh, _ = generate_primitive(spec)
    write_ascii_ply(models / "obj_000001.ply", mesh)
    scene_path, _ = box_scene(tmp_path)
    result = invoke("simulate", "--spec", scene_path, "--models", models,
                    "--n", 8, "--out", tmp_path / "field.bin")
    assert result.exit_code == 0, result.output
    frag_path = models / "frags_000001.json"
    assert frag_path.exists()
    assert fileio.load_fragments(frag_path, mesh).n_fragments == 8
