"""Surface-fragment correspondence extraction and multi-instance pose fitting.

The package covers the geometric half of a dense correspondence pose
pipeline: fragmenting object models, turning per-cell probability and
regression grids into many-to-many 2D-3D correspondences, fitting poses of
possibly several instances per object with a robust sampling loop, and
scoring the results with depth-, surface- and projection-based errors.
"""

from .errors import (
    FragposeError,
    BehindCameraError,
    DegenerateConfigurationError,
    DimensionMismatchError,
    DuplicateCentersError,
    EmptyGridError,
    GridTooLargeError,
    InvalidPoseError,
    ModelMismatchError,
    NoSolutionError,
    NonFiniteInputError,
    NonTriangulatedError,
    ParseError,
    TooFewCorrespondencesError,
    TooFewVerticesError,
)
from .geometry import CameraIntrinsics, Pose, project, reprojection_error, transform_point

__all__ = [
    "FragposeError",
    "BehindCameraError",
    "DegenerateConfigurationError",
    "DimensionMismatchError",
    "DuplicateCentersError",
    "EmptyGridError",
    "GridTooLargeError",
    "InvalidPoseError",
    "ModelMismatchError",
    "NoSolutionError",
    "NonFiniteInputError",
    "NonTriangulatedError",
    "ParseError",
    "TooFewCorrespondencesError",
    "TooFewVerticesError",
    "CameraIntrinsics",
    "Pose",
    "project",
    "reprojection_error",
    "transform_point",
]

__version__ = "0.1.0"
