"""Exception taxonomy shared across the package.

Every error raised on a documented failure path derives from FragposeError
so callers (and the CLI) can catch one base class and map it to an exit
code.  Errors carry plain-language messages; ParseError additionally keeps
the byte offset or line number where a model file became unreadable.
"""


class FragposeError(Exception):
    """Base class for all failures raised by this package."""


class InvalidPoseError(FragposeError):
    """Rotation is not special orthogonal within tolerance."""


class BehindCameraError(FragposeError):
    """A point required in front of the camera has z <= 0."""


class TooFewVerticesError(FragposeError):
    """Mesh or point set has fewer usable vertices than required."""


class DuplicateCentersError(FragposeError):
    """Fragment centers are not pairwise distinct."""


class ModelMismatchError(FragposeError):
    """Prediction grid layout disagrees with the supplied models."""


class NonFiniteInputError(FragposeError):
    """NaN/inf encountered, or a probability is exactly 0 where the
    reference distribution puts mass 1."""


class DimensionMismatchError(FragposeError):
    """Array arguments have inconsistent shapes."""


class NoSolutionError(FragposeError):
    """Minimal solver found no real, valid solution."""


class DegenerateConfigurationError(FragposeError):
    """Point configuration too degenerate to solve (collinear, coincident,
    or otherwise rank deficient)."""


class TooFewCorrespondencesError(FragposeError):
    """Not enough correspondences for the requested operation."""


class GridTooLargeError(FragposeError):
    """Brute-force search grid exceeds the allowed cell count."""


class EmptyGridError(FragposeError):
    """Search grid contains no candidate at all."""


class ParseError(FragposeError):
    """Model or container file is malformed.

    Attributes:
        path: file being parsed, if known.
        line: 1-based line number for text formats, None for binary.
        offset: byte offset for binary formats, None for text.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.path = path
        self.line = line
        self.offset = offset


class NonTriangulatedError(FragposeError):
    """Mesh file contains faces that are not triangles."""
