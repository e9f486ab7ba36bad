"""Pose-error metrics and their recall aggregation.

Three complementary error functions compare an estimated pose against a
ground-truth pose: a depth-map discrepancy over the visible surface, a
symmetry-aware maximum 3D vertex deviation, and its 2D projection analog.
Recall rates over threshold grids are averaged into a single score.

Symmetry transforms are model-space rigid motions that map the object's
surface onto itself; metrics take the best match over the whole set, so
poses that look identical score identically.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyGridError
from .fragments import MeshModel
from .geometry import CameraIntrinsics, Pose, project
from .raster import DepthMap, render_depth, visibility_mask

# model-space transforms, identity first by convention
SymmetrySet = tuple

DEFAULT_VISIBILITY_TOLERANCE = 15.0  # mm, scene-occlusion slack


def identity_symmetries() -> SymmetrySet:
    return (Pose(np.eye(3), np.zeros(3)),)


def compose_with_symmetry(pose: Pose, symmetry: Pose) -> Pose:
    """Pose that first applies the model-space symmetry, then the pose."""
    return Pose(pose.rotation @ symmetry.rotation,
                pose.rotation @ symmetry.translation + pose.translation)


def _validated_grid(values, name: str) -> tuple:
    grid = tuple(float(v) for v in values)
    if not grid:
        raise EmptyGridError(f"{name} grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise EmptyGridError(f"{name} grid must be strictly increasing")
    return grid


@dataclass(frozen=True)
class PoseErrorConfig:
    """Threshold grids for the recall aggregation.

    vsd_taus are misalignment tolerances in mm, usually fractions of the
    object diameter; vsd_deltas is the occlusion slack in mm used when
    building visibility masks.  mssd thresholds are mm, mspd thresholds
    pixels (already scaled by mspd_scale = image_width / 640).
    """

    vsd_taus: tuple
    vsd_thetas: tuple
    mssd_thetas: tuple
    mspd_thetas: tuple
    vsd_deltas: float = DEFAULT_VISIBILITY_TOLERANCE
    mspd_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "vsd_taus", _validated_grid(self.vsd_taus, "vsd_taus"))
        object.__setattr__(self, "vsd_thetas", _validated_grid(self.vsd_thetas, "vsd_thetas"))
        object.__setattr__(self, "mssd_thetas", _validated_grid(self.mssd_thetas, "mssd_thetas"))
        object.__setattr__(self, "mspd_thetas", _validated_grid(self.mspd_thetas, "mspd_thetas"))
        if self.vsd_deltas <= 0:
            raise DimensionMismatchError("visibility tolerance must be positive")

    @classmethod
    def bop_default(cls, diameter: float, image_width: int = 640):
        """Challenge-convention grids for one object: fractions 5%..50%."""
        fractions = np.arange(1, 11) * 0.05
        scale = image_width / 640.0
        return cls(vsd_taus=tuple(fractions * diameter),
                   vsd_thetas=tuple(fractions),
                   mssd_thetas=tuple(fractions * diameter),
                   mspd_thetas=tuple(np.arange(1, 11) * 5.0 * scale),
                   mspd_scale=scale)


@dataclass(frozen=True)
class InstanceErrors:
    """Per-instance metric values; vsd holds one value per tau."""

    vsd: np.ndarray
    mssd: float
    mspd: float

    @classmethod
    def missing(cls, config: PoseErrorConfig):
        """Errors charged to an annotated instance nobody estimated."""
        return cls(vsd=np.full(len(config.vsd_taus), np.inf),
                   mssd=np.inf, mspd=np.inf)


def e_vsd(est: Pose, gt: Pose, model: MeshModel, camera: CameraIntrinsics,
          scene_depth: DepthMap, tau: float,
          delta: float = DEFAULT_VISIBILITY_TOLERANCE) -> float:
    """Visible-surface depth discrepancy in [0, 1].

    Renders both poses, restricts to pixels where either rendering is
    visible against the scene depth, and counts the fraction that are
    covered by only one rendering or disagree in depth by at least tau.
    """
    if scene_depth.values.shape != (camera.height, camera.width):
        raise DimensionMismatchError("scene depth does not match the camera")
    d_est = render_depth(model, est, camera)
    d_gt = render_depth(model, gt, camera)
    v_est = visibility_mask(d_est, scene_depth, delta)
    v_gt = visibility_mask(d_gt, scene_depth, delta)
    union = v_est | v_gt
    n_union = int(np.count_nonzero(union))
    if n_union == 0:
        return 0.0
    both = v_est & v_gt
    close = both & (np.abs(d_est.values - d_gt.values) < tau)
    return 1.0 - np.count_nonzero(close) / n_union


def e_mssd(est: Pose, gt: Pose, model: MeshModel,
           symmetries: SymmetrySet) -> float:
    """Max vertex deviation in mm, minimized over the symmetry set."""
    est_pts = est.transform(model.vertices)
    best = np.inf
    for sym in symmetries:
        gt_pts = compose_with_symmetry(gt, sym).transform(model.vertices)
        dev = float(np.linalg.norm(est_pts - gt_pts, axis=1).max())
        best = min(best, dev)
    return best


def e_mspd(est: Pose, gt: Pose, model: MeshModel, symmetries: SymmetrySet,
           camera: CameraIntrinsics) -> float:
    """Max projected vertex deviation in px, minimized over symmetries.

    A candidate symmetry placing any vertex behind the camera scores +inf
    and drops out of the minimum; so does the estimate itself.
    """
    est_cam = est.transform(model.vertices)
    if np.any(est_cam[:, 2] <= 0.0):
        return np.inf
    est_px = project(camera, est_cam)
    best = np.inf
    for sym in symmetries:
        gt_cam = compose_with_symmetry(gt, sym).transform(model.vertices)
        if np.any(gt_cam[:, 2] <= 0.0):
            continue
        dev = float(np.linalg.norm(est_px - project(camera, gt_cam), axis=1).max())
        best = min(best, dev)
    return best


def recall(values: np.ndarray, threshold: float) -> float:
    """Fraction of instances with error strictly below the threshold."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return 0.0
    return float(np.count_nonzero(values < threshold)) / len(values)


def average_recall(errors, config: PoseErrorConfig):
    """(AR_VSD, AR_MSSD, AR_MSPD, AR) over a list of InstanceErrors.

    VSD recall is averaged over the full tau x theta grid; the other two
    metrics average over their threshold grids.  Instances with missing
    estimates must be included with +inf errors.
    """
    errors = list(errors)
    if not errors:
        return 0.0, 0.0, 0.0, 0.0
    vsd = np.array([np.asarray(e.vsd, dtype=np.float64) for e in errors])
    if vsd.shape[1] != len(config.vsd_taus):
        raise DimensionMismatchError("one VSD value per tau is required")
    mssd = np.array([e.mssd for e in errors], dtype=np.float64)
    mspd = np.array([e.mspd for e in errors], dtype=np.float64)

    ar_vsd = float(np.mean([recall(vsd[:, i], theta)
                            for i in range(len(config.vsd_taus))
                            for theta in config.vsd_thetas]))
    ar_mssd = float(np.mean([recall(mssd, theta) for theta in config.mssd_thetas]))
    ar_mspd = float(np.mean([recall(mspd, theta) for theta in config.mspd_thetas]))
    ar = (ar_vsd + ar_mssd + ar_mspd) / 3.0
    return ar_vsd, ar_mssd, ar_mspd, ar


def recall_curves(errors, config: PoseErrorConfig) -> dict:
    """Per-threshold recall tables for the evaluation report."""
    errors = list(errors)
    vsd = np.array([np.asarray(e.vsd, dtype=np.float64) for e in errors]) \
        if errors else np.zeros((0, len(config.vsd_taus)))
    mssd = np.array([e.mssd for e in errors], dtype=np.float64)
    mspd = np.array([e.mspd for e in errors], dtype=np.float64)
    return {
        "vsd": [{"tau": tau, "theta": theta,
                 "recall": recall(vsd[:, i], theta) if len(errors) else 0.0}
                for i, tau in enumerate(config.vsd_taus)
                for theta in config.vsd_thetas],
        "mssd": [{"theta": theta, "recall": recall(mssd, theta)}
                 for theta in config.mssd_thetas],
        "mspd": [{"theta": theta, "recall": recall(mspd, theta)}
                 for theta in config.mspd_thetas],
    }
