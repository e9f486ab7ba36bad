"""Command-line pipeline: fragment, simulate, estimate, evaluate, render-debug.

Failures print one machine-readable JSON object on stderr and exit 1, so
wrapping scripts never have to scrape tracebacks.
"""

import functools
import json
import os
import re
import sys
import time

import click
import numpy as np
from PIL import Image
from scipy.optimize import linear_sum_assignment

from . import fileio
from .errors import FragposeError, ModelMismatchError, ParseError
from .field import extract_correspondences, generate_ground_truth_field
from .fitting import FittingParams, progressive_x
from .fragments import fragment_model
from .harness import CorruptionSpec, synthesize_predictions
from .metrics import InstanceErrors, PoseErrorConfig, average_recall, e_mspd, \
    e_mssd, e_vsd
from .raster import DepthMap, render_scene


def _fail(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for key in ("path", "line", "offset"):
        value = getattr(exc, key, None)
        if value is not None:
            doc[key] = str(value) if key == "path" else value
    click.echo(json.dumps(doc, sort_keys=True), err=True)
    sys.exit(1)


def _guarded(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (FragposeError, OSError, ValueError) as exc:
            _fail(exc)
    return wrapper


@click.group()
def main():
    """Surface-fragment pose estimation pipeline."""


def _object_id_from_name(path) -> int:
    match = re.search(r"obj_(\d{6})\.ply$", os.path.basename(path))
    return int(match.group(1)) if match else 1


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_fragments", default=64, show_default=True,
              help="Number of surface fragments.")
@click.option("--object-id", default=None, type=int,
              help="Override the id inferred from the file name.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def fragment(model_path, n_fragments, object_id, out_path):
    """Decompose a PLY mesh into surface fragments."""
    if object_id is None:
        object_id = _object_id_from_name(model_path)
    model = fileio.load_mesh_ply(model_path, object_id=object_id)
    fragmented = fragment_model(model, n_fragments)
    fileio.save_fragments(fragmented, out_path)
    click.echo(f"wrote {n_fragments} fragments for object {object_id} to {out_path}")


def _load_corruption(path, seed):
    if path is None:
        doc = {}
    else:
        doc = fileio._load_json(path)
        if not isinstance(doc, dict):
            raise ParseError("corruption file must hold an object", path=path)
        known = set(CorruptionSpec.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ParseError(f"unknown corruption keys: {', '.join(unknown)}",
                             path=path)
    if seed is not None:
        doc["rng_seed"] = seed
    return CorruptionSpec(**doc)


def _scene_models(scene, models_dir, n_fragments):
    """(FragmentedModel, SymmetrySet) per object in the scene, id-ascending.

    Missing fragment files are computed and saved next to the mesh so the
    later stages read the same decomposition.
    """
    ids = sorted({oid for oid, _ in scene.instances})
    out = []
    for oid in ids:
        mesh_path = os.path.join(models_dir, fileio.MODEL_FILE.format(oid))
        frag_path = os.path.join(models_dir, fileio.FRAGMENTS_FILE.format(oid))
        if not os.path.exists(frag_path):
            model = fileio.load_mesh_ply(mesh_path, object_id=oid)
            fileio.save_fragments(fragment_model(model, n_fragments), frag_path)
        out.append(fileio.load_model_entry(models_dir, oid))
    return out


@main.command()
@click.option("--spec", "scene_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--corruption", "corruption_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--n", "n_fragments", default=64, show_default=True,
              help="Fragment count when frags_*.json is missing.")
@click.option("--seed", default=None, type=int,
              help="Override the corruption rng seed.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def simulate(scene_path, corruption_path, models_dir, n_fragments, seed, out_path):
    """Synthesize a prediction field for a described scene."""
    scene = fileio.load_scene(scene_path)
    corruption = _load_corruption(corruption_path, seed)
    pairs = _scene_models(scene, models_dir, n_fragments)

    gt = generate_ground_truth_field([fm for fm, _ in pairs], list(scene.instances),
                                     scene.camera)
    pred = synthesize_predictions(gt, pairs, corruption)
    fileio.save_field(pred, out_path, scene_id=scene.scene_id, im_id=scene.im_id,
                      instance_counts=scene.instance_counts(), camera=scene.camera)

    if scene.depth_path:
        by_id = {fm.model.object_id: fm.model for fm, _ in pairs}
        depth, _ = render_scene([(by_id[oid], pose) for oid, pose in scene.instances],
                                scene.camera, want_indices=False)
        depth_file = os.path.join(os.path.dirname(scene_path) or ".", scene.depth_path)
        fileio.save_depth_png(depth.values, depth_file)
    click.echo(f"wrote field ({pred.m} objects, stride {pred.stride}) to {out_path}")


def _fitting_params(params: dict, seed) -> FittingParams:
    if seed is not None:
        params = dict(params, rng_seed=seed)
    names = set(FittingParams.__dataclass_fields__)
    return FittingParams(**{k: v for k, v in params.items() if k in names})


@main.command()
@click.option("--field", "field_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--params", "params_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=None, type=int,
              help="Override the fitting rng seed.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def estimate(field_path, models_dir, params_path, seed, out_path):
    """Fit instance poses to a prediction field."""
    pred, header = fileio.load_field(field_path)
    camera = fileio.camera_from_field_header(header, path=field_path)
    params = fileio.load_params(params_path)
    fit_params = _fitting_params(params, seed)

    available = set(fileio.model_ids_in(models_dir))
    missing = [oid for oid in pred.object_ids if oid not in available]
    if missing:
        raise ModelMismatchError(f"models directory lacks objects {missing}")
    pairs = [fileio.load_model_entry(models_dir, oid) for oid in pred.object_ids]

    # raises ModelMismatchError when the field's fragment count disagrees
    corr = extract_correspondences(pred, [fm for fm, _ in pairs],
                                   tau_a=params["tau_a"], tau_b=params["tau_b"])

    counts = {int(k): int(v) for k, v in header.get("instance_counts", {}).items()}
    rows = []
    for oid in pred.object_ids:
        start = time.perf_counter()
        hypotheses = progressive_x(corr[oid], camera, fit_params,
                                   expected_instances=counts.get(oid))
        elapsed = time.perf_counter() - start
        for hyp in hypotheses:
            rows.append(fileio.ResultRow(
                scene_id=header.get("scene_id", 1), im_id=header.get("im_id", 1),
                obj_id=oid, score=float(hyp.quality), pose=hyp.pose,
                time=elapsed))
    fileio.save_results(rows, out_path)
    click.echo(f"estimated {len(rows)} instances over {pred.m} objects -> {out_path}")


def _scene_depth(scene, scene_path, meshes):
    """Measured depth if the scene references one, else a rendering of it."""
    if scene.depth_path:
        depth_file = os.path.join(os.path.dirname(scene_path) or ".", scene.depth_path)
        if os.path.exists(depth_file):
            return DepthMap(values=fileio.load_depth_png(depth_file))
    depth, _ = render_scene([(meshes[oid], pose) for oid, pose in scene.instances],
                            scene.camera, want_indices=False)
    return depth


@main.command()
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--gt", "scene_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def evaluate(results_path, scene_path, models_dir, out_path):
    """Score results against ground truth; writes a recall report."""
    rows = fileio.load_results(results_path)
    scene = fileio.load_scene(scene_path)
    ids = sorted({oid for oid, _ in scene.instances})
    entries = {oid: fileio.load_model_entry(models_dir, oid) for oid in ids}
    meshes = {oid: fm.model for oid, (fm, _) in entries.items()}
    depth = _scene_depth(scene, scene_path, meshes)

    report = {"per_object": {}, "scene_id": scene.scene_id, "im_id": scene.im_id}
    collected = []
    for oid in ids:
        fragmented, symmetries = entries[oid]
        model = fragmented.model
        config = PoseErrorConfig.bop_default(model.diameter,
                                             image_width=scene.camera.width)
        gt_poses = [pose for o, pose in scene.instances if o == oid]
        est = [r for r in rows
               if r.obj_id == oid and r.scene_id == scene.scene_id
               and r.im_id == scene.im_id]
        est.sort(key=lambda r: -r.score)
        est = est[:len(gt_poses)]

        errors = _match_errors(est, gt_poses, model, symmetries, scene.camera,
                               depth, config)
        collected.extend(errors)
        ar_vsd, ar_mssd, ar_mspd, ar = average_recall(errors, config)
        report["per_object"][str(oid)] = {
            "n_gt": len(gt_poses), "n_est": len(est),
            "ar_vsd": ar_vsd, "ar_mssd": ar_mssd, "ar_mspd": ar_mspd, "ar": ar,
        }
    per = report["per_object"].values()
    report["overall"] = {key: float(np.mean([p[key] for p in per])) if per else 0.0
                         for key in ("ar_vsd", "ar_mssd", "ar_mspd", "ar")}
    fileio._atomic_write(out_path, fileio._dump_json(report))
    click.echo(f"overall AR {report['overall']['ar']:.4f} -> {out_path}")


def _match_errors(est, gt_poses, model, symmetries, camera, depth, config):
    """One InstanceErrors per annotated pose, Hungarian-matched on e_mssd."""
    if not gt_poses:
        return []
    if not est:
        return [InstanceErrors.missing(config) for _ in gt_poses]
    cost = np.zeros((len(est), len(gt_poses)))
    for i, row in enumerate(est):
        for j, gt_pose in enumerate(gt_poses):
            cost[i, j] = e_mssd(row.pose, gt_pose, model, symmetries)
    est_idx, gt_idx = linear_sum_assignment(cost)
    matched = dict(zip(gt_idx, est_idx))

    errors = []
    for j, gt_pose in enumerate(gt_poses):
        if j not in matched:
            errors.append(InstanceErrors.missing(config))
            continue
        pose = est[matched[j]].pose
        vsd = np.array([e_vsd(pose, gt_pose, model, camera, depth, tau,
                              delta=config.vsd_deltas)
                        for tau in config.vsd_taus])
        errors.append(InstanceErrors(
            vsd=vsd, mssd=cost[matched[j], j],
            mspd=e_mspd(pose, gt_pose, model, symmetries, camera)))
    return errors


@main.command("render-debug")
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--scene", "scene_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Scene file supplying the camera.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def render_debug(results_path, models_dir, scene_path, out_dir):
    """Render estimated poses to depth and silhouette PNGs."""
    rows = fileio.load_results(results_path)
    camera = fileio.load_scene(scene_path).camera
    os.makedirs(out_dir, exist_ok=True)

    meshes = {}
    groups = {}
    for row in rows:
        groups.setdefault((row.scene_id, row.im_id), []).append(row)
        if row.obj_id not in meshes:
            path = os.path.join(models_dir, fileio.MODEL_FILE.format(row.obj_id))
            meshes[row.obj_id] = fileio.load_mesh_ply(path, object_id=row.obj_id)

    written = []
    for (scene_id, im_id), group in sorted(groups.items()):
        depth, _ = render_scene([(meshes[r.obj_id], r.pose) for r in group],
                                camera, want_indices=False)
        stem = f"{scene_id:06d}_{im_id:06d}"
        depth_file = os.path.join(out_dir, f"depth_{stem}.png")
        fileio.save_depth_png(depth.values, depth_file)
        mask = (depth.covered() * np.uint8(255))
        sil_file = os.path.join(out_dir, f"mask_{stem}.png")
        Image.fromarray(mask).save(sil_file)
        written.extend([depth_file, sil_file])
    click.echo(f"wrote {len(written)} debug images to {out_dir}")


if __name__ == "__main__":
    main()
