"""Synthetic scenes and controlled prediction corruption.

This module stands in for the dense prediction network: it builds primitive
test objects with known symmetry sets, renders ground-truth label fields
for randomly posed instances, and then corrupts those fields in measured,
seeded ways (coordinate noise, label jitter, outlier cells, symmetry
blending).  A tiny grid-search pose oracle and a plain threshold-consensus
RANSAC baseline round out the test doubles used by the evaluation suite.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    GridTooLargeError,
    NoSolutionError,
)
from .field import GroundTruthField, PredictionField
from .fitting import SAMPLE_SIZE, FittingParams, PoseHypothesis, hypothesis_quality
from .fragments import FragmentedModel, MeshModel
from .geometry import CameraIntrinsics, Pose, reprojection_errors
from .metrics import SymmetrySet, identity_symmetries
from .raster import render_depth
from .solvers import degeneracy_check, epnp, p3p, pose_sanity

MAX_GRID_CELLS = 1_000_000
MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class PrimitiveSpec:
    """Recipe for one synthetic test object.

    kind selects the generator; dimensions are mm and kind-specific:
    box (sx, sy, sz), cylinder-approx (radius, height), sphere-approx
    (radius,), asymmetric-bracket (leg, width, thickness).  tessellation
    controls ring/band counts where applicable.
    """

    kind: str
    dimensions: tuple
    object_id: int = 1
    tessellation: int = 36

    def __post_init__(self):
        if self.kind not in ("box", "cylinder-approx", "sphere-approx",
                             "asymmetric-bracket"):
            raise DimensionMismatchError(f"unknown primitive kind: {self.kind}")
        if any(d <= 0 for d in self.dimensions):
            raise DimensionMismatchError("primitive dimensions must be positive")
        if self.tessellation < 3:
            raise DimensionMismatchError("tessellation needs at least 3 steps")


def _rot_z(angle: float) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
                np.zeros(3))


def _box_mesh(sx, sy, sz):
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    verts = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ])
    tris = np.array([
        [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
        [0, 1, 5], [0, 5, 4], [3, 7, 6], [3, 6, 2],
        [0, 4, 7], [0, 7, 3], [1, 2, 6], [1, 6, 5],
    ], dtype=np.int64)
    return verts, tris


def _cylinder_mesh(radius, height, segments):
    angles = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    # subdivide the wall so vertex spacing is ~isotropic (rows match arc length);
    # every row keeps the same angular offsets, so ring symmetries still
    # permute vertices exactly
    arc = 2.0 * np.pi * radius / segments
    rows = max(1, int(round(height / arc)))
    levels = np.linspace(-height / 2.0, height / 2.0, rows + 1)
    verts = np.vstack(
        [np.column_stack([ring, np.full(segments, z)]) for z in levels]
        + [[[0.0, 0.0, -height / 2.0], [0.0, 0.0, height / 2.0]]])
    cb, ct = (rows + 1) * segments, (rows + 1) * segments + 1
    tris = []
    for row in range(rows):
        lo, hi = row * segments, (row + 1) * segments
        for k in range(segments):
            k2 = (k + 1) % segments
            tris.append([lo + k, lo + k2, hi + k])
            tris.append([lo + k2, hi + k2, hi + k])
    top = rows * segments
    for k in range(segments):
        k2 = (k + 1) % segments
        tris.append([cb, k2, k])
        tris.append([ct, top + k, top + k2])
    return verts, np.array(tris, dtype=np.int64)


def _sphere_mesh(radius, segments):
    bands = max(3, segments // 2)
    verts = [[0.0, 0.0, -radius]]
    for band in range(1, bands):
        phi = np.pi * band / bands - np.pi / 2.0
        for k in range(segments):
            theta = 2.0 * np.pi * k / segments
            verts.append([radius * np.cos(phi) * np.cos(theta),
                          radius * np.cos(phi) * np.sin(theta),
                          radius * np.sin(phi)])
    verts.append([0.0, 0.0, radius])
    south, north = 0, len(verts) - 1

    def vid(band, k):
        return 1 + (band - 1) * segments + (k % segments)

    tris = []
    for k in range(segments):
        tris.append([south, vid(1, k + 1), vid(1, k)])
        tris.append([north, vid(bands - 1, k), vid(bands - 1, k + 1)])
    for band in range(1, bands - 1):
        for k in range(segments):
            a, b = vid(band, k), vid(band, k + 1)
            c, d = vid(band + 1, k), vid(band + 1, k + 1)
            tris.append([a, b, d])
            tris.append([a, d, c])
    return np.array(verts), np.array(tris, dtype=np.int64)


def _bracket_mesh(leg, width, thickness):
    # L-shaped cross section in the xy plane, extruded along z
    t, a, w = thickness, leg, width / 2.0
    profile = np.array([
        [0.0, 0.0], [a, 0.0], [a, t], [t, t], [t, a], [0.0, a],
    ])
    profile = profile - profile.mean(axis=0)
    front = np.column_stack([profile, np.full(6, w)])
    back = np.column_stack([profile, np.full(6, -w)])
    verts = np.vstack([front, back])
    caps = [[0, 1, 2], [0, 2, 3], [0, 3, 5], [3, 4, 5]]
    tris = [list(tri) for tri in caps]
    tris += [[tri[0] + 6, tri[2] + 6, tri[1] + 6] for tri in caps]
    for k in range(6):
        k2 = (k + 1) % 6
        tris.append([k2, k, 6 + k])
        tris.append([k2, 6 + k, 6 + k2])
    return verts, np.array(tris, dtype=np.int64)


def generate_primitive(spec: PrimitiveSpec):
    """Mesh plus its declared proper symmetry transforms."""
    if spec.kind == "box":
        sx, sy, sz = spec.dimensions
        verts, tris = _box_mesh(sx, sy, sz)
        if sx == sy:
            syms = tuple(_rot_z(k * np.pi / 2.0) for k in range(4))
        else:
            syms = (_rot_z(0.0), _rot_z(np.pi))
    elif spec.kind == "cylinder-approx":
        radius, height = spec.dimensions
        verts, tris = _cylinder_mesh(radius, height, spec.tessellation)
        syms = tuple(_rot_z(2.0 * np.pi * k / spec.tessellation)
                     for k in range(spec.tessellation))
    elif spec.kind == "sphere-approx":
        (radius,) = spec.dimensions
        verts, tris = _sphere_mesh(radius, spec.tessellation)
        syms = tuple(_rot_z(2.0 * np.pi * k / spec.tessellation)
                     for k in range(spec.tessellation))
    else:
        leg, width, thickness = spec.dimensions
        verts, tris = _bracket_mesh(leg, width, thickness)
        syms = identity_symmetries()
    model = MeshModel(object_id=spec.object_id, vertices=verts, triangles=tris)
    return model, syms


def symmetry_self_distance(model: MeshModel, symmetry: Pose) -> float:
    """Max distance from any transformed vertex to the nearest vertex."""
    tree = cKDTree(model.vertices)
    moved = symmetry.transform(model.vertices)
    dist, _ = tree.query(moved)
    return float(dist.max())


@dataclass(frozen=True)
class PoseBounds:
    """Axis-aligned translation box, mm; rotations are unrestricted."""

    x: tuple = (-100.0, 100.0)
    y: tuple = (-80.0, 80.0)
    z: tuple = (900.0, 1300.0)

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            if hi <= lo:
                raise DimensionMismatchError("pose bounds must be non-empty ranges")
        if self.z[0] <= 0:
            raise DimensionMismatchError("translation bounds must keep z positive")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation matrix (quaternion subgroup algorithm)."""
    u1, u2, u3 = rng.uniform(size=3)
    q = np.array([
        np.sqrt(1.0 - u1) * np.sin(2.0 * np.pi * u2),
        np.sqrt(1.0 - u1) * np.cos(2.0 * np.pi * u2),
        np.sqrt(u1) * np.sin(2.0 * np.pi * u3),
        np.sqrt(u1) * np.cos(2.0 * np.pi * u3),
    ])
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def sample_scene(models, instance_counts, camera: CameraIntrinsics,
                 pose_bounds: PoseBounds, rng: np.random.Generator,
                 allow_overlap: bool = False):
    """Randomly posed instances, optionally with disjoint silhouettes.

    Args:
        models: list of MeshModel.
        instance_counts: instances per model, aligned with models.
    Returns:
        list of (model, Pose) in placement order.
    """
    if len(models) != len(instance_counts):
        raise DimensionMismatchError("one instance count per model required")
    placed = []
    occupied = np.zeros((camera.height, camera.width), dtype=bool)
    for model, count in zip(models, instance_counts):
        for _ in range(count):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                pose = Pose(random_rotation(rng), np.array([
                    rng.uniform(*pose_bounds.x),
                    rng.uniform(*pose_bounds.y),
                    rng.uniform(*pose_bounds.z),
                ]))
                if allow_overlap:
                    break
                silhouette = render_depth(model, pose, camera).covered()
                if not (silhouette & occupied).any():
                    occupied |= silhouette
                    break
            else:
                raise NoSolutionError(
                    "could not place an instance without silhouette overlap")
            placed.append((model, pose))
    return placed


@dataclass(frozen=True)
class CorruptionSpec:
    """Measured damage applied to a perfect prediction field.

    coord_noise_sigma is in fragment-coordinate units; pixel_jitter_sigma
    in grid cells; outlier_rate is the fraction of foreground cells whose
    fragment and coordinates are replaced by junk.  cluster_outliers makes
    that junk spatially contiguous and locally coherent instead of i.i.d.
    With regression disabled every regressed coordinate is zero, so decoded
    points collapse to fragment centers (the centers-only ablation).
    """

    coord_noise_sigma: float = 0.0
    pixel_jitter_sigma: float = 0.0
    outlier_rate: float = 0.0
    confidence_noise: float = 0.0
    symmetry_blend: bool = False
    regression: bool = True
    cluster_outliers: bool = False
    cluster_size: int = 25
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise DimensionMismatchError("outlier_rate must lie in [0, 1)")
        if min(self.coord_noise_sigma, self.pixel_jitter_sigma,
               self.confidence_noise) < 0.0:
            raise DimensionMismatchError("noise magnitudes must be non-negative")
        if self.cluster_size <= 0:
            raise DimensionMismatchError("cluster_size must be positive")


def fragment_orbits(fragmented: FragmentedModel, symmetries: SymmetrySet,
                    tolerance_factor: float = 0.5):
    """Per-fragment list of (equivalent fragment, symmetry index).

    Fragment j is equivalent to j2 under symmetry T when T maps j's center
    within tolerance_factor * scale_j of j2's center.  The identity makes
    every fragment its own orbit member.
    """
    centers = fragmented.centers
    tree = cKDTree(centers)
    orbits = [[] for _ in range(len(centers))]
    for t_idx, sym in enumerate(symmetries):
        moved = sym.transform(centers)
        dist, nearest = tree.query(moved)
        for j, (d, j2) in enumerate(zip(dist, nearest)):
            hit = d <= tolerance_factor * fragmented.scales[j]
            if hit and all(m != j2 for m, _ in orbits[j]):
                orbits[j].append((int(j2), t_idx))
    return orbits


def _soften_probabilities(a, slots, noise, rng):
    """One-hot object probabilities with a random mass leak per cell."""
    m = a.shape[0] - 1
    hc, wc = slots.shape
    eps = rng.uniform(0.0, noise, size=(hc, wc)) if noise > 0 else np.zeros((hc, wc))
    for slot in range(m + 1):
        sel = slots == slot
        a[:, sel] = (eps[sel] / m)[None, :] if m else 0.0
        a[slot, sel] = 1.0 - eps[sel]


def _jittered_labels(gt: GroundTruthField, sigma: float, rng):
    """Labels read from a Gaussian-jittered source cell where compatible."""
    slots = gt.object_slot
    frag = gt.fragment.copy()
    coords = gt.coords.copy()
    if sigma <= 0.0:
        return frag, coords
    hc, wc = slots.shape
    rows, cols = np.nonzero(slots > 0)
    dr = np.rint(rng.normal(0.0, sigma, size=len(rows))).astype(np.int64)
    dc = np.rint(rng.normal(0.0, sigma, size=len(rows))).astype(np.int64)
    src_r = np.clip(rows + dr, 0, hc - 1)
    src_c = np.clip(cols + dc, 0, wc - 1)
    same = slots[src_r, src_c] == slots[rows, cols]
    frag[rows[same], cols[same]] = gt.fragment[src_r[same], src_c[same]]
    coords[rows[same], cols[same]] = gt.coords[src_r[same], src_c[same]]
    return frag, coords


def _pick_outlier_cells(rows, cols, rate, clustered, cluster_size, rng):
    """Indices into (rows, cols) that become junk cells."""
    n_fg = len(rows)
    n_out = int(round(rate * n_fg))
    if n_out == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    if not clustered:
        chosen = rng.choice(n_fg, size=n_out, replace=False)
        return chosen, np.zeros(n_out, dtype=np.int64)
    # grow blobs around random seeds until the quota is filled
    xy = np.column_stack([rows, cols]).astype(np.float64)
    remaining = np.arange(n_fg)
    chosen, cluster_of = [], []
    cluster_id = 0
    while sum(len(c) for c in chosen) < n_out and len(remaining):
        seed = remaining[rng.integers(len(remaining))]
        d = np.linalg.norm(xy[remaining] - xy[seed], axis=1)
        take = remaining[np.argsort(d)[:cluster_size]]
        quota = n_out - sum(len(c) for c in chosen)
        take = take[:quota]
        chosen.append(take)
        cluster_of.append(np.full(len(take), cluster_id, dtype=np.int64))
        remaining = np.setdiff1d(remaining, take, assume_unique=False)
        cluster_id += 1
    return np.concatenate(chosen), np.concatenate(cluster_of)


def synthesize_predictions(gt: GroundTruthField, models,
                           corruption: CorruptionSpec) -> PredictionField:
    """Corrupted prediction field that still satisfies all field invariants.

    models must be (FragmentedModel, SymmetrySet) pairs aligned with
    gt.object_ids; the symmetry sets are only consulted when
    corruption.symmetry_blend is set.
    """
    rng = np.random.default_rng(corruption.rng_seed)
    m = gt.m
    hc, wc = gt.object_slot.shape
    n = gt.n_fragments
    if len(models) != m:
        raise DimensionMismatchError("one (model, symmetries) pair per object required")

    slots = gt.object_slot
    frag, coords = _jittered_labels(gt, corruption.pixel_jitter_sigma, rng)

    a = np.zeros((m + 1, hc, wc))
    _soften_probabilities(a, slots, corruption.confidence_noise, rng)
    b = np.zeros((m, n, hc, wc))
    r = np.zeros((m, n, 3, hc, wc))

    for i, (fragmented, symmetries) in enumerate(models):
        rows, cols = np.nonzero(slots == i + 1)
        if len(rows) == 0:
            continue
        orbits = (fragment_orbits(fragmented, symmetries)
                  if corruption.symmetry_blend else None)
        cell_frag = frag[rows, cols]
        for j in np.unique(cell_frag):
            sel = cell_frag == j
            rr, cc = rows[sel], cols[sel]
            members = orbits[j] if orbits is not None else [(int(j), 0)]
            share = 1.0 / len(members)
            points = fragmented.decode(int(j), coords[rr, cc])
            for j2, t_idx in members:
                sym = symmetries[t_idx] if orbits is not None else None
                moved = sym.transform(points) if sym is not None else points
                local = fragmented.encode(j2, moved)
                if corruption.coord_noise_sigma > 0:
                    local = local + rng.normal(0.0, corruption.coord_noise_sigma,
                                               size=local.shape)
                b[i, j2, rr, cc] = share
                r[i, j2, :, rr, cc] = local

        picked, cluster_of = _pick_outlier_cells(
            rows, cols, corruption.outlier_rate, corruption.cluster_outliers,
            corruption.cluster_size, rng)
        if len(picked):
            orr, occ = rows[picked], cols[picked]
            # where the network hallucinates it is also less sure: shift a
            # random share of objectness to background (wrong object
            # activation), staying far above extraction thresholds so the
            # junk still comes through at full outlier_rate
            damp = rng.uniform(0.6, 1.0, size=len(picked))
            kept = a[i + 1, orr, occ] * damp
            a[0, orr, occ] += a[i + 1, orr, occ] - kept
            a[i + 1, orr, occ] = kept
            b[i, :, orr, occ] = 0.0
            if corruption.cluster_outliers:
                for cl in np.unique(cluster_of):
                    csel = cluster_of == cl
                    junk_frag = int(rng.integers(n))
                    base = rng.uniform(-1.0, 1.0, size=3)
                    local = np.clip(base + rng.normal(0.0, 0.15, size=(int(csel.sum()), 3)),
                                    -1.0, 1.0)
                    b[i, junk_frag, orr[csel], occ[csel]] = 1.0
                    r[i, junk_frag, :, orr[csel], occ[csel]] = local
            else:
                junk_frag = rng.integers(n, size=len(picked))
                local = rng.uniform(-1.0, 1.0, size=(len(picked), 3))
                b[i, :, orr, occ] = 0.0
                b[i, junk_frag, orr, occ] = 1.0
                r[i, junk_frag, :, orr, occ] = local

    # cells that carry no mass for an object fall back to uniform fragments
    empty = ~(b.sum(axis=1) > 0)
    for i in range(m):
        b[i, :, empty[i]] = 1.0 / n
    if not corruption.regression:
        r[:] = 0.0

    return PredictionField(stride=gt.stride, width=gt.width, height=gt.height,
                           object_ids=gt.object_ids, a=a, b=b, r=r).validate()


def plain_ransac_baseline(corr, camera: CameraIntrinsics, params: FittingParams,
                          rng: np.random.Generator):
    """Uniform-sampling threshold-consensus RANSAC with a final EPnP refit.

    The reference point for the pipeline comparisons: no confidence
    ordering, no spatial coherence, no iterative local optimization, no LM.
    Consensus is the plain inlier count at tau_r.
    """
    if len(corr) < SAMPLE_SIZE:
        return None
    best_pose, best_count = None, 0
    for _ in range(params.tau_i):
        sample = rng.choice(len(corr), size=SAMPLE_SIZE, replace=False)
        pix, pts = corr.pixels[sample], corr.points[sample]
        if not degeneracy_check(pix, pts, tau_t=params.tau_t):
            continue
        try:
            candidates = p3p(pix, pts, camera)
        except DegenerateConfigurationError:
            continue
        for pose in candidates:
            if not pose_sanity(pose, pts):
                continue
            errors = reprojection_errors(pose, camera, corr.pixels, corr.points)
            count = int(np.count_nonzero(errors < params.tau_r))
            if count > best_count:
                best_pose, best_count = pose, count
    if best_pose is None:
        return None
    errors = reprojection_errors(best_pose, camera, corr.pixels, corr.points)
    inliers = np.flatnonzero(errors < params.tau_r)
    if len(inliers) >= 4:
        try:
            best_pose = epnp(corr.pixels[inliers], corr.points[inliers], camera)
        except (DegenerateConfigurationError, NoSolutionError):
            pass
    quality = hypothesis_quality(best_pose, corr, camera, params.tau_r)
    return PoseHypothesis(best_pose, quality, inliers, corr.object_id)


def brute_force_pose_search(corr, camera: CameraIntrinsics,
                            rotation_grid, translation_grid) -> Pose:
    """Exhaustive argmax of hypothesis_quality over a pose grid.

    Estimator-independent reference for tiny instances.  The grid size
    check precedes every other failure mode; an empty correspondence set
    scores every pose 0 and deterministically yields the first grid pose.
    """
    rotations = np.asarray(rotation_grid, dtype=np.float64).reshape(-1, 3, 3)
    translations = np.asarray(translation_grid, dtype=np.float64).reshape(-1, 3)
    total = len(rotations) * len(translations)
    if total > MAX_GRID_CELLS:
        raise GridTooLargeError(f"{total} grid poses exceed {MAX_GRID_CELLS}")
    if total == 0:
        raise GridTooLargeError("pose grid is empty")
    best_pose, best_q = None, -1.0
    for rot in rotations:
        for tra in translations:
            pose = Pose(rot, tra)
            q = hypothesis_quality(pose, corr, camera, FittingParams().tau_r)
            if q > best_q:
                best_pose, best_q = pose, q
    return best_pose
