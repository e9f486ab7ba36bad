"""Object models and their decomposition into surface fragments.

A model surface is split into n fragments by assigning every vertex to the
nearest of n fragment centers.  Centers come from farthest point sampling
over the vertices, seeded at the model centroid; the centroid itself is not
part of the result.  Each fragment j has a scale h_j (longest side of the
axis-aligned bounding box of its vertices, model frame) used to express
surface points in normalised fragment-local coordinates

    r = (x - g_j) / h_j          x = g_j + h_j * r.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import cdist

from .errors import (
    DimensionMismatchError,
    DuplicateCentersError,
    NonFiniteInputError,
    TooFewVerticesError,
)

# scale assigned to fragments whose vertex set has no spatial extent
DEGENERATE_SCALE_FRACTION = 0.01


def mesh_diameter(vertices: np.ndarray) -> float:
    """Largest pairwise vertex distance.

    Uses the convex hull to keep the pair search small; falls back to the
    direct scan for tiny or degenerate (flat) vertex sets.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    pts = vertices
    if len(vertices) > 16:
        try:
            pts = vertices[ConvexHull(vertices).vertices]
        except Exception:
            pts = vertices
    d = cdist(pts, pts)
    return float(d.max())


@dataclass(frozen=True)
class MeshModel:
    """Triangle mesh in model coordinates (mm).

    Attributes:
        object_id: positive integer identity of the object.
        vertices: (V, 3) float array.
        triangles: (T, 3) int array of vertex indices.
        diameter: largest pairwise vertex distance, computed if omitted.
    """

    object_id: int
    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float = field(default=0.0)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        tris = np.asarray(self.triangles, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DimensionMismatchError("vertices must be (V, 3)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise DimensionMismatchError("triangles must be (T, 3)")
        if not np.all(np.isfinite(verts)):
            raise NonFiniteInputError("mesh vertices contain non-finite values")
        if len(verts) < 4:
            raise TooFewVerticesError("mesh needs at least 4 vertices")
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise DimensionMismatchError("triangle indices out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        if self.diameter <= 0.0:
            object.__setattr__(self, "diameter", mesh_diameter(verts))

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def farthest_point_sample(vertices: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest point sampling over mesh vertices.

    The running set is seeded with the vertex centroid (a virtual point that
    never appears in the output).  Each step picks the vertex with the
    largest distance to the nearest already-selected point; exact distance
    ties resolve to the lowest vertex index.

    Returns:
        (count,) int array of selected vertex indices, in selection order.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    n_verts = len(vertices)
    if count < 1:
        raise DimensionMismatchError("count must be >= 1")
    if count > n_verts:
        raise TooFewVerticesError(f"cannot sample {count} centers from {n_verts} vertices")

    centroid = vertices.mean(axis=0)
    min_dist = np.linalg.norm(vertices - centroid, axis=1)
    selected = np.empty(count, dtype=np.int64)
    for k in range(count):
        best = int(np.argmax(min_dist))  # argmax returns the lowest index on ties
        selected[k] = best
        d = np.linalg.norm(vertices - vertices[best], axis=1)
        np.minimum(min_dist, d, out=min_dist)
    return selected


def assign_fragments(vertices: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Label every vertex with the index of its nearest center.

    Exact distance ties go to the lowest center index.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise DimensionMismatchError("centers must be (n, 3)")
    if len(centers) > 1 and cdist(centers, centers)[np.triu_indices(len(centers), 1)].min() == 0.0:
        raise DuplicateCentersError("fragment centers must be pairwise distinct")
    d = cdist(vertices, centers)
    return np.argmin(d, axis=1).astype(np.int64)  # argmin takes lowest index on ties


def fragment_scales(vertices: np.ndarray, labels: np.ndarray, n: int, diameter: float) -> np.ndarray:
    """Per-fragment scale h_j: longest axis-aligned bbox side of the
    fragment's vertices; fragments with no extent get a small fraction of
    the model diameter so encoding stays well defined."""
    scales = np.zeros(n)
    for j in range(n):
        pts = vertices[labels == j]
        if len(pts) == 0:
            scales[j] = DEGENERATE_SCALE_FRACTION * diameter
            continue
        extent = pts.max(axis=0) - pts.min(axis=0)
        h = float(extent.max())
        scales[j] = h if h > 0.0 else DEGENERATE_SCALE_FRACTION * diameter
    return scales


@dataclass(frozen=True)
class FragmentedModel:
    """A mesh plus its fragment decomposition.

    Attributes:
        model: the source mesh.
        centers: (n, 3) fragment center coordinates (always mesh vertices).
        scales: (n,) per-fragment scale h_j > 0.
        vertex_fragment: (V,) fragment label per mesh vertex.
    """

    model: MeshModel
    centers: np.ndarray
    scales: np.ndarray
    vertex_fragment: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        labels = np.asarray(self.vertex_fragment, dtype=np.int64)
        if centers.ndim != 2 or centers.shape[1] != 3:
            raise DimensionMismatchError("centers must be (n, 3)")
        if scales.shape != (len(centers),):
            raise DimensionMismatchError("scales must align with centers")
        if labels.shape != (len(self.model.vertices),):
            raise DimensionMismatchError("vertex_fragment must label every vertex")
        if np.any(scales <= 0.0):
            raise DimensionMismatchError("fragment scales must be positive")
        if len(centers) > 1:
            dmin = cdist(centers, centers)[np.triu_indices(len(centers), 1)].min()
            if dmin == 0.0:
                raise DuplicateCentersError("fragment centers must be pairwise distinct")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "vertex_fragment", labels)

    @property
    def n_fragments(self) -> int:
        return len(self.centers)

    def encode(self, fragment: int, points: np.ndarray) -> np.ndarray:
        """Model-frame points (..., 3) -> fragment-local coordinates."""
        points = np.asarray(points, dtype=np.float64)
        return (points - self.centers[fragment]) / self.scales[fragment]

    def decode(self, fragment: int, coords: np.ndarray) -> np.ndarray:
        """Fragment-local coordinates (..., 3) -> model-frame points."""
        coords = np.asarray(coords, dtype=np.float64)
        return coords * self.scales[fragment] + self.centers[fragment]

    def decode_batch(self, fragments: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Vectorised decode for per-row fragment indices."""
        fragments = np.asarray(fragments, dtype=np.int64)
        coords = np.asarray(coords, dtype=np.float64)
        return coords * self.scales[fragments, None] + self.centers[fragments]

    def nearest_fragment(self, points: np.ndarray) -> np.ndarray:
        """Fragment label of the nearest center for arbitrary points (..., 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = cdist(pts, self.centers)
        out = np.argmin(d, axis=1).astype(np.int64)
        return out if np.asarray(points).ndim > 1 else out[0]


def fragment_model(model: MeshModel, n: int) -> FragmentedModel:
    """Decompose a mesh into n surface fragments.

    Raises:
        TooFewVerticesError: if the mesh has fewer than n vertices.
    """
    idx = farthest_point_sample(model.vertices, n)
    centers = model.vertices[idx]
    labels = assign_fragments(model.vertices, centers)
    scales = fragment_scales(model.vertices, labels, n, model.diameter)
    return FragmentedModel(model=model, centers=centers, scales=scales, vertex_fragment=labels)
