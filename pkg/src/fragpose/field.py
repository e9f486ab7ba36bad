"""Dense per-cell prediction grids and 2D-3D correspondence extraction.

A prediction field covers the image with a grid of cells at a fixed pixel
stride s; cell (gr, gc) is anchored at the full-resolution pixel centre

    (u, v) = (s * gc + (s - 1) / 2,  s * gr + (s - 1) / 2).

Per cell the field stores, for m objects with n fragments each:
  * a: (m + 1) object probabilities (index 0 is background),
  * b: per-object fragment probabilities (n per object),
  * r: per-object, per-fragment regressed fragment-local coordinates.

Channel count is therefore (m + 1) + m*n + 3*m*n = 4*m*n + m + 1.

Correspondences are extracted many-to-many: a cell emits one 2D-3D pair for
every fragment whose probability clears a fraction tau_b of the cell's best
fragment, for every object whose probability clears tau_a.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    DimensionMismatchError,
    ModelMismatchError,
    NonFiniteInputError,
)
from .fragments import FragmentedModel
from .geometry import CameraIntrinsics, Pose
from .raster import render_scene

PROB_SUM_TOL = 1e-6
LOG_CLAMP = 1e-12

DEFAULT_STRIDE = 4
DEFAULT_TAU_A = 0.1
DEFAULT_TAU_B = 0.5


def grid_shape(camera: CameraIntrinsics, stride: int):
    if camera.width % stride or camera.height % stride:
        raise DimensionMismatchError(
            f"image {camera.width}x{camera.height} is not divisible by stride {stride}")
    return camera.height // stride, camera.width // stride


def cell_centers(h_cells: int, w_cells: int, stride: int) -> np.ndarray:
    """(Hc, Wc, 2) full-resolution pixel centres of every cell."""
    off = (stride - 1) / 2.0
    us = np.arange(w_cells) * stride + off
    vs = np.arange(h_cells) * stride + off
    u, v = np.meshgrid(us, vs)
    return np.stack([u, v], axis=-1)


def cell_camera(camera: CameraIntrinsics, stride: int) -> CameraIntrinsics:
    """Camera whose integer pixel centres coincide with cell anchors."""
    h_cells, w_cells = grid_shape(camera, stride)
    off = (stride - 1) / 2.0
    return CameraIntrinsics(
        fx=camera.fx / stride, fy=camera.fy / stride,
        cx=(camera.cx - off) / stride, cy=(camera.cy - off) / stride,
        width=w_cells, height=h_cells,
    )


@dataclass
class PredictionField:
    """Dense per-cell predictions for one image.

    Attributes:
        stride: cell size in pixels.
        width, height: full-resolution image size.
        object_ids: the m object identities covered, in channel order.
        a: (m + 1, Hc, Wc), per-cell object probabilities, a[0] background.
        b: (m, n, Hc, Wc), per-cell fragment probabilities per object.
        r: (m, n, 3, Hc, Wc), fragment-local coordinate regression.
    """

    stride: int
    width: int
    height: int
    object_ids: tuple
    a: np.ndarray
    b: np.ndarray
    r: np.ndarray

    @property
    def m(self) -> int:
        return len(self.object_ids)

    @property
    def n(self) -> int:
        return self.b.shape[1]

    @property
    def cells(self):
        return self.a.shape[1], self.a.shape[2]

    def channel_count(self) -> int:
        return 4 * self.m * self.n + self.m + 1

    def validate(self):
        m = self.m
        hc, wc = self.cells
        if self.width % self.stride or self.height % self.stride:
            raise DimensionMismatchError("image size must be divisible by the stride")
        if (hc, wc) != (self.height // self.stride, self.width // self.stride):
            raise DimensionMismatchError("cell grid does not match image size and stride")
        n = self.n
        if self.a.shape != (m + 1, hc, wc):
            raise DimensionMismatchError("object probability grid has wrong shape")
        if self.b.shape != (m, n, hc, wc):
            raise DimensionMismatchError("fragment probability grid has wrong shape")
        if self.r.shape != (m, n, 3, hc, wc):
            raise DimensionMismatchError("coordinate grid has wrong shape")
        for arr, name in ((self.a, "a"), (self.b, "b"), (self.r, "r")):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInputError(f"{name} contains non-finite values")
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise NonFiniteInputError("probabilities must be non-negative")
        if np.abs(self.a.sum(axis=0) - 1.0).max() > PROB_SUM_TOL:
            raise NonFiniteInputError("object probabilities must sum to 1 per cell")
        if np.abs(self.b.sum(axis=1) - 1.0).max() > PROB_SUM_TOL:
            raise NonFiniteInputError("fragment probabilities must sum to 1 per cell")
        return self


@dataclass
class GroundTruthField:
    """Reference labels per cell: winning object, fragment, coordinates.

    object_slot is 0 on background, else 1..m indexing into object_ids;
    fragment is -1 on background; coords holds fragment-local coordinates
    of the true visible surface point at the cell centre.
    """

    stride: int
    width: int
    height: int
    object_ids: tuple
    object_slot: np.ndarray  # (Hc, Wc) int16
    fragment: np.ndarray  # (Hc, Wc) int32
    coords: np.ndarray  # (Hc, Wc, 3) float64
    n_fragments: int = 1

    @property
    def m(self) -> int:
        return len(self.object_ids)

    def foreground_count(self) -> int:
        return int((self.object_slot > 0).sum())


def generate_ground_truth_field(models, instances, camera: CameraIntrinsics,
                                stride: int = DEFAULT_STRIDE) -> GroundTruthField:
    """Rasterise a scene and label every covered cell.

    Args:
        models: list of FragmentedModel, one per distinct object.
        instances: list of (object_id, Pose).
        camera: full-resolution camera.
        stride: cell stride in pixels.
    """
    by_id = {fm.model.object_id: fm for fm in models}
    for oid, _ in instances:
        if oid not in by_id:
            raise ModelMismatchError(f"instance references unknown object {oid}")
    n_set = {fm.n_fragments for fm in models}
    if len(n_set) != 1:
        raise ModelMismatchError("all models must share one fragment count")
    object_ids = tuple(fm.model.object_id for fm in models)
    slot_of = {oid: i + 1 for i, oid in enumerate(object_ids)}

    cam = cell_camera(camera, stride)
    scene = [(by_id[oid].model, pose) for oid, pose in instances]
    depth, index = render_scene(scene, cam)

    hc, wc = cam.height, cam.width
    object_slot = np.zeros((hc, wc), dtype=np.int16)
    fragment = np.full((hc, wc), -1, dtype=np.int32)
    coords = np.zeros((hc, wc, 3))

    covered = depth.covered()
    rows, cols = np.nonzero(covered)
    if len(rows):
        oids = index.object_id[rows, cols]
        pts = index.points[rows, cols]
        for oid in np.unique(oids):
            fm = by_id[int(oid)]
            sel = oids == oid
            frag = fm.nearest_fragment(pts[sel])
            object_slot[rows[sel], cols[sel]] = slot_of[int(oid)]
            fragment[rows[sel], cols[sel]] = frag
            local = (pts[sel] - fm.centers[frag]) / fm.scales[frag, None]
            coords[rows[sel], cols[sel]] = local

    return GroundTruthField(
        stride=stride, width=camera.width, height=camera.height,
        object_ids=object_ids, object_slot=object_slot,
        fragment=fragment, coords=coords, n_fragments=n_set.pop(),
    )


def field_from_ground_truth(gt: GroundTruthField) -> PredictionField:
    """Exact one-hot prediction field reproducing the reference labels."""
    m = gt.m
    hc, wc = gt.object_slot.shape
    n = gt.n_fragments
    a = np.zeros((m + 1, hc, wc))
    b = np.zeros((m, n, hc, wc))
    r = np.zeros((m, n, 3, hc, wc))
    slots = gt.object_slot
    a[0] = slots == 0
    for i in range(1, m + 1):
        sel = slots == i
        a[i] = sel
        rows, cols = np.nonzero(sel)
        frags = gt.fragment[rows, cols]
        b[i - 1, frags, rows, cols] = 1.0
        # background cells for object i keep a uniform fragment distribution
        r[i - 1, frags, :, rows, cols] = gt.coords[rows, cols]
    bg = ~(b.sum(axis=1) > 0)
    for i in range(m):
        b[i, :, bg[i]] = 1.0 / n
    return PredictionField(
        stride=gt.stride, width=gt.width, height=gt.height,
        object_ids=gt.object_ids, a=a, b=b, r=r,
    )


@dataclass
class CorrespondenceSet:
    """Many-to-many 2D-3D correspondences for one object in one image.

    Rows are emitted cell-major (row-major cell order, ascending fragment
    index within a cell).  pixel_index maps each row to a compact id of its
    source cell so per-pixel aggregation stays cheap.
    """

    object_id: int
    pixels: np.ndarray  # (N, 2) float64, full-resolution pixel coordinates
    points: np.ndarray  # (N, 3) float64, model frame
    fragments: np.ndarray  # (N,) int64
    confidences: np.ndarray  # (N,) float64
    cells: np.ndarray  # (N,) int64, gr * Wc + gc
    pixel_index: np.ndarray = dc_field(default=None, repr=False)
    n_pixels: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.fragments = np.asarray(self.fragments, dtype=np.int64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1)
        sizes = {len(self.pixels), len(self.points), len(self.fragments),
                 len(self.confidences), len(self.cells)}
        if len(sizes) != 1:
            raise DimensionMismatchError("correspondence arrays must align")
        if self.pixel_index is None:
            uniq, inv = np.unique(self.cells, return_inverse=True)
            self.pixel_index = inv.astype(np.int64)
            self.n_pixels = len(uniq)

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, indices) -> "CorrespondenceSet":
        indices = np.asarray(indices)
        return CorrespondenceSet(
            object_id=self.object_id,
            pixels=self.pixels[indices],
            points=self.points[indices],
            fragments=self.fragments[indices],
            confidences=self.confidences[indices],
            cells=self.cells[indices],
        )


def extract_correspondences(pred: PredictionField, models,
                            tau_a: float = DEFAULT_TAU_A,
                            tau_b: float = DEFAULT_TAU_B) -> dict:
    """Turn a prediction field into per-object correspondence sets.

    A cell emits a correspondence (cell centre, decoded 3D point) for
    object i and fragment j iff a_i > tau_a and b_ij exceeds tau_b times
    the cell's best fragment probability for that object.  Confidence is
    a_i * b_ij.

    Returns:
        dict mapping object_id -> CorrespondenceSet.
    """
    if len(models) != pred.m:
        raise ModelMismatchError(f"field covers {pred.m} objects, got {len(models)} models")
    for fm, oid in zip(models, pred.object_ids):
        if fm.model.object_id != oid:
            raise ModelMismatchError("model order must match field object ids")
        if fm.n_fragments != pred.n:
            raise ModelMismatchError(
                f"object {oid} has {fm.n_fragments} fragments, field stores {pred.n}")

    hc, wc = pred.cells
    centers = cell_centers(hc, wc, pred.stride).reshape(-1, 2)
    out = {}
    for i, fm in enumerate(models):
        a_i = pred.a[i + 1].reshape(-1)
        b_i = pred.b[i].reshape(pred.n, -1)
        r_i = pred.r[i].reshape(pred.n, 3, -1)

        active = a_i > tau_a
        cell_ids = np.nonzero(active)[0]
        if len(cell_ids) == 0:
            out[fm.model.object_id] = CorrespondenceSet(
                object_id=fm.model.object_id,
                pixels=np.empty((0, 2)), points=np.empty((0, 3)),
                fragments=np.empty(0, dtype=np.int64),
                confidences=np.empty(0), cells=np.empty(0, dtype=np.int64))
            continue

        bsel = b_i[:, cell_ids]  # (n, K)
        keep = bsel > tau_b * bsel.max(axis=0, keepdims=True)
        frag_idx, cell_pos = np.nonzero(keep)
        cells = cell_ids[cell_pos]
        # reorder to cell-major, fragment-minor
        order = np.lexsort((frag_idx, cells))
        frag_idx, cell_pos, cells = frag_idx[order], cell_pos[order], cells[order]

        conf = a_i[cells] * bsel[frag_idx, cell_pos]
        local = r_i[frag_idx, :, cells]
        points = local * fm.scales[frag_idx, None] + fm.centers[frag_idx]
        out[fm.model.object_id] = CorrespondenceSet(
            object_id=fm.model.object_id,
            pixels=centers[cells],
            points=points,
            fragments=frag_idx.astype(np.int64),
            confidences=conf,
            cells=cells.astype(np.int64),
        )
    return out


def _huber(diff: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def training_loss(pred: PredictionField, gt: GroundTruthField,
                  lambda1: float = 1.0, lambda2: float = 100.0,
                  huber_delta: float = 1.0) -> float:
    """Reference evaluation loss over one image.

    Per cell: cross entropy of the object distribution, plus, on foreground
    cells, the fragment cross entropy weighted by lambda1 and the Huber
    coordinate error weighted by lambda2 (summed over the 3 components).
    The result is the mean over all cells.

    Raises:
        NonFiniteInputError: on non-finite inputs, or when a probability is
            exactly 0 where the reference puts mass 1 (infinite loss).
    """
    if pred.object_ids != gt.object_ids or pred.stride != gt.stride:
        raise ModelMismatchError("field and reference cover different layouts")
    if pred.cells != gt.object_slot.shape:
        raise ModelMismatchError("field and reference grids have different sizes")
    for arr in (pred.a, pred.b, pred.r):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError("prediction contains non-finite values")

    hc, wc = pred.cells
    slots = gt.object_slot.reshape(-1)
    a = pred.a.reshape(pred.m + 1, -1)

    a_true = a[slots, np.arange(len(slots))]
    if np.any(a_true == 0.0):
        raise NonFiniteInputError("object probability is 0 where the reference is 1")
    total = -np.log(np.maximum(a_true, LOG_CLAMP)).sum()

    fg = np.nonzero(slots > 0)[0]
    if len(fg):
        obj = slots[fg] - 1
        frag = gt.fragment.reshape(-1)[fg]
        b_true = pred.b.reshape(pred.m, pred.n, -1)[obj, frag, fg]
        if np.any(b_true == 0.0):
            raise NonFiniteInputError("fragment probability is 0 where the reference is 1")
        total += lambda1 * -np.log(np.maximum(b_true, LOG_CLAMP)).sum()
        r_pred = pred.r.reshape(pred.m, pred.n, 3, -1)[obj, frag, :, fg]
        r_true = gt.coords.reshape(-1, 3)[fg]
        total += lambda2 * _huber(r_pred - r_true, huber_delta).sum()

    return float(total / (hc * wc))
