"""Rigid-body poses, pinhole cameras, projection and reprojection errors.

Conventions used throughout the package:
  * model (world) coordinates are millimetres,
  * a pose maps model points into the camera frame, x_cam = R x + t,
  * pixel coordinates are (u, v) with u along image columns, and the
    centre of pixel (row r, col c) sits exactly at (u, v) = (c, r),
  * the camera looks down +z; points with z <= 0 are behind the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    DimensionMismatchError,
    InvalidPoseError,
    NonFiniteInputError,
)

ROTATION_TOL = 1e-9


def rotation_is_valid(rotation: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    """True iff rotation is orthonormal with determinant +1 within tol."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
        return False
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    return err <= tol and abs(np.linalg.det(rotation) - 1.0) <= tol


@dataclass(frozen=True)
class Pose:
    """Rigid transform from model to camera coordinates (t in mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise DimensionMismatchError(f"rotation must be 3x3, got {rot.shape}")
        if tra.shape != (3,):
            raise DimensionMismatchError(f"translation must have 3 entries, got {tra.shape}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def is_valid(self, tol: float = ROTATION_TOL) -> bool:
        return rotation_is_valid(self.rotation, tol) and bool(
            np.all(np.isfinite(self.translation))
        )

    def require_valid(self, tol: float = ROTATION_TOL) -> "Pose":
        if not self.is_valid(tol):
            raise InvalidPoseError("rotation is not special orthogonal within tolerance")
        return self

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to one point (3,) or a stack (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        if points.shape[-1] != 3:
            raise DimensionMismatchError("points must have a trailing dimension of 3")
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def almost_equal(self, other: "Pose", rot_tol: float = 1e-9, t_tol: float = 1e-6) -> bool:
        return (rotation_angle_between(self.rotation, other.rotation) <= rot_tol
                and float(np.linalg.norm(self.translation - other.translation)) <= t_tol)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DimensionMismatchError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise DimensionMismatchError("image size must be positive")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise NonFiniteInputError("camera intrinsics contain non-finite values")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float, du: float = 0.0, dv: float = 0.0) -> "CameraIntrinsics":
        """Camera for an image resampled by `factor` after shifting the
        pixel grid by (du, dv) in original pixels."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx - du) * factor,
            cy=(self.cy - dv) * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


def transform_point(pose: Pose, point: np.ndarray) -> np.ndarray:
    """Map a model-frame point into the camera frame."""
    return pose.transform(point)


def project(camera: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2).

    Raises:
        BehindCameraError: if any point has z <= 0.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    if points_cam.shape[-1] != 3:
        raise DimensionMismatchError("points must have a trailing dimension of 3")
    z = points_cam[..., 2]
    if np.any(z <= 0.0):
        raise BehindCameraError("point has z <= 0 in the camera frame")
    u = camera.fx * points_cam[..., 0] / z + camera.cx
    v = camera.fy * points_cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project_safe(camera: CameraIntrinsics, points_cam: np.ndarray):
    """Project (..., 3) points, flagging instead of raising behind-camera.

    Returns:
        (pixels, in_front): pixels are valid only where in_front is True.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    in_front = z > 0.0
    zsafe = np.where(in_front, z, 1.0)
    u = camera.fx * points_cam[..., 0] / zsafe + camera.cx
    v = camera.fy * points_cam[..., 1] / zsafe + camera.cy
    return np.stack([u, v], axis=-1), in_front


def reprojection_error(pose: Pose, camera: CameraIntrinsics, pixel: np.ndarray,
                       point_model: np.ndarray) -> float:
    """Euclidean pixel distance between `pixel` and the projected point.

    Raises:
        BehindCameraError: if the transformed point has z <= 0.
    """
    projected = project(camera, pose.transform(point_model))
    pixel = np.asarray(pixel, dtype=np.float64)
    if pixel.shape != (2,):
        raise DimensionMismatchError("pixel must have shape (2,)")
    return float(np.linalg.norm(projected - pixel))


def reprojection_errors(pose: Pose, camera: CameraIntrinsics, pixels: np.ndarray,
                        points_model: np.ndarray) -> np.ndarray:
    """Vectorised reprojection errors; behind-camera points get +inf."""
    pixels = np.asarray(pixels, dtype=np.float64)
    points_model = np.asarray(points_model, dtype=np.float64)
    if pixels.shape[0] != points_model.shape[0]:
        raise DimensionMismatchError("pixels and points must pair up")
    projected, in_front = project_safe(camera, pose.transform(points_model))
    err = np.linalg.norm(projected - pixels, axis=-1)
    err[~in_front] = np.inf
    return err


def axis_angle_to_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula; the vector's norm is the angle in radians."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # second order series keeps the map smooth through zero
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = w / theta
    k = skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_angle_between(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations.

    Computed from both the symmetric and antisymmetric parts; plain
    arccos of the trace cannot resolve angles below ~1e-8.
    """
    r = np.asarray(r1) @ np.asarray(r2).T
    axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(np.linalg.norm(axis), c))


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise DimensionMismatchError("axis must be nonzero")
    return axis_angle_to_matrix(axis / n * angle)
