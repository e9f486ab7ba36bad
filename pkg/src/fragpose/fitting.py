"""Robust multi-instance pose fitting.

Confidence-ordered sampling proposes minimal-solver poses, a graph cut over
a 5D neighborhood graph selects spatially coherent inlier sets, and an
energy-based maintenance loop keeps exactly as many instances as the data
pays for.  Everything is seeded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    NoSolutionError,
    TooFewCorrespondencesError,
)
from .field import CorrespondenceSet
from .geometry import CameraIntrinsics, Pose, reprojection_errors
from .solvers import degeneracy_check, epnp, p3p, pose_sanity, refine_lm

CM_PER_MM = 0.1
SAMPLE_SIZE = 3
FLOW_SCALE = 65536  # unary quantisation for the integer max-flow solver
ENERGY_SLACK = 1e-9


@dataclass(frozen=True)
class FittingParams:
    """Thresholds and weights for the whole fitting pipeline."""

    tau_d: float = 20.0  # 5D neighborhood radius (px / cm mixed units)
    tau_r: float = 4.0  # inlier reprojection threshold, px
    tau_i: int = 400  # proposal iteration budget
    tau_q: float = 0.5  # early-stop hypothesis quality
    tau_t: float = 100.0  # degeneracy triangle area, px^2
    spatial_weight: float = 0.1
    label_cost: float = 10.0
    rng_seed: int = 0
    max_instances: int = 8
    # PROSAC T_N; None ties it to tau_i so the pot spans every
    # correspondence within the loop even when confidences are all tied
    prosac_budget: int | None = None

    def __post_init__(self):
        if min(self.tau_d, self.tau_r, self.tau_t) <= 0:
            raise DimensionMismatchError("distance thresholds must be positive")
        if self.tau_i <= 0 or not 0 < self.tau_q <= 1:
            raise DimensionMismatchError("iteration budget and tau_q out of range")
        if self.spatial_weight < 0 or self.label_cost < 0:
            raise DimensionMismatchError("weights must be non-negative")
        if self.max_instances <= 0 or (self.prosac_budget is not None
                                       and self.prosac_budget <= 0):
            raise DimensionMismatchError("instance cap and sampling budget must be positive")

    @property
    def sampling_budget(self) -> int:
        return self.prosac_budget if self.prosac_budget is not None else self.tau_i


@dataclass(frozen=True)
class NeighborhoodGraph:
    """Radius graph over per-correspondence 5D descriptors.

    edges holds each undirected edge once as (i, j) with i < j; indptr and
    indices form the symmetric adjacency in CSR layout.
    """

    correspondences: CorrespondenceSet
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.correspondences)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]


@dataclass(frozen=True)
class PoseHypothesis:
    pose: Pose
    quality: float
    inlier_ids: np.ndarray
    object_id: int


@dataclass
class FitStats:
    """Optional counters a caller can pass to observe the proposal loop."""

    samples_drawn: int = 0
    degenerate_samples: int = 0
    hypotheses_scored: int = 0


def correspondence_descriptors(corr: CorrespondenceSet) -> np.ndarray:
    """(N, 5) descriptors: pixel coords in px, model coords in cm."""
    return np.column_stack([corr.pixels, corr.points * CM_PER_MM])


def build_neighborhood_graph(corr: CorrespondenceSet, tau_d: float) -> NeighborhoodGraph:
    """Exact strict-radius graph on the 5D descriptors."""
    desc = correspondence_descriptors(corr)
    n = len(corr)
    pairs = cKDTree(desc).query_pairs(tau_d, output_type="ndarray")
    if len(pairs):
        # query_pairs is boundary-inclusive; the contract is strict
        gaps = np.linalg.norm(desc[pairs[:, 0]] - desc[pairs[:, 1]], axis=1)
        pairs = pairs[gaps < tau_d]
    edges = np.sort(pairs, axis=1) if len(pairs) else np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else []
    edges = edges[order] if len(edges) else edges

    both = np.concatenate([edges, edges[:, ::-1]]) if len(edges) else np.empty((0, 2), dtype=np.int64)
    counts = np.bincount(both[:, 0], minlength=n) if len(both) else np.zeros(n, dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if len(both):
        srt = np.lexsort((both[:, 1], both[:, 0]))
        indices = both[srt, 1].astype(np.int64)
    else:
        indices = np.empty(0, dtype=np.int64)
    return NeighborhoodGraph(corr, edges.astype(np.int64), indptr, indices)


def prosac_ordering(corr: CorrespondenceSet,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices sorted by confidence descending, stable for ties.

    Without an rng, correspondence sets come out of extraction in
    cell-major fragment-minor order, so the positional tiebreak doubles as
    the (pixel, fragment) rule.  With one, ties break randomly: predictors
    often emit level confidences, and a deterministic tiebreak then locks
    the early sampling pot onto one image region (fatal when the junk is
    spatially clustered), whereas shuffled ties degrade to plain uniform
    sampling.
    """
    n = len(corr)
    if rng is None:
        return np.lexsort((np.arange(n), corr.fragments, corr.cells,
                           -corr.confidences))
    return np.lexsort((rng.permutation(n), -corr.confidences))


@lru_cache(maxsize=64)
def _growth_limits(n_corr: int, sample_size: int, budget: int) -> tuple:
    """1-based iteration at which the sampling pot grows to each size.

    Entry k is the iteration where the pot becomes sample_size + k; the pot
    reaches the full set at the last entry, after which sampling is uniform.
    """
    m = sample_size
    t_n = float(budget)
    for i in range(m):
        t_n *= (m - i) / (n_corr - i)
    limits = [1]
    t_prime = 1
    for n in range(m, n_corr):
        t_next = t_n * (n + 1) / (n + 1 - m)
        t_prime = t_prime + int(np.ceil(t_next - t_n))
        t_n = t_next
        limits.append(t_prime)
    return tuple(limits)


def prosac_pot_size(iteration: int, n_corr: int, sample_size: int = SAMPLE_SIZE,
                    budget: int = 200000) -> int:
    """Size of the top-confidence pot the given 0-based iteration draws from."""
    limits = _growth_limits(n_corr, sample_size, budget)
    tau = iteration + 1
    idx = int(np.searchsorted(limits, tau, side="right"))
    return min(sample_size + idx - 1, n_corr)


def prosac_horizon(n_corr: int, sample_size: int = SAMPLE_SIZE, budget: int = 200000) -> int:
    """0-based iteration from which sampling is uniform over all correspondences."""
    return _growth_limits(n_corr, sample_size, budget)[-1]


def prosac_sample(ordering: np.ndarray, iteration: int, rng: np.random.Generator,
                  sample_size: int = SAMPLE_SIZE, budget: int = 200000) -> np.ndarray:
    """Draw a minimal sample, focusing early iterations on high confidence.

    Follows the standard growth schedule: the pot of candidate
    correspondences starts at the sample size and widens until it covers
    the whole set, after which draws are uniform.  While growing, the
    newest pot member is always included.
    """
    n = len(ordering)
    if n < sample_size:
        raise TooFewCorrespondencesError(f"need at least {sample_size} correspondences")
    limits = _growth_limits(n, sample_size, budget)
    tau = iteration + 1
    pot = prosac_pot_size(iteration, n, sample_size, budget)
    if pot >= n and tau > limits[-1]:
        positions = rng.choice(n, size=sample_size, replace=False)
    else:
        rest = rng.choice(pot - 1, size=sample_size - 1, replace=False)
        positions = np.concatenate([[pot - 1], rest])
    return ordering[positions]


def hypothesis_quality(pose: Pose, corr: CorrespondenceSet, camera: CameraIntrinsics,
                       tau_r: float) -> float:
    """Average over pixels of the best truncated correspondence score.

    Each pixel contributes the maximum of 1 - (e/tau_r)^2 over its
    correspondences, floored at zero; behind-camera projections score 0.
    """
    if len(corr) == 0:
        return 0.0
    errors = reprojection_errors(pose, camera, corr.pixels, corr.points)
    scores = 1.0 - (errors / tau_r) ** 2
    scores = np.where(np.isfinite(scores) & (scores > 0.0), scores, 0.0)
    per_pixel = np.zeros(corr.n_pixels)
    np.maximum.at(per_pixel, corr.pixel_index, scores)
    return float(per_pixel.mean())


def _inlier_costs(pose: Pose, corr: CorrespondenceSet, camera: CameraIntrinsics,
                  tau_r: float) -> np.ndarray:
    """Truncated data cost of serving each correspondence with the pose."""
    errors = reprojection_errors(pose, camera, corr.pixels, corr.points)
    with np.errstate(invalid="ignore"):
        cost = (errors / tau_r) ** 2
    return np.where(np.isfinite(cost), np.minimum(cost, 1.0), 1.0)


def graph_cut_inliers(pose: Pose, corr: CorrespondenceSet, graph: NeighborhoodGraph,
                      camera: CameraIntrinsics, tau_r: float,
                      spatial_weight: float) -> np.ndarray:
    """Exact minimum-cut inlier selection.

    A correspondence pays its truncated reprojection cost as an inlier and
    the fixed unit cost as an outlier (the same data terms the maintenance
    energy uses), plus the smoothness weight for every cut neighborhood
    edge.  With zero smoothness this reduces to thresholding at tau_r.
    """
    costs = _inlier_costs(pose, corr, camera, tau_r)
    if spatial_weight <= 0.0 or len(graph.edges) == 0:
        return np.flatnonzero(costs < 1.0).astype(np.int64)

    n = len(corr)
    source, sink = n, n + 1
    cap_in = np.rint(costs * FLOW_SCALE).astype(np.int64)
    cap_edge = min(int(round(spatial_weight * FLOW_SCALE)), 2 ** 30)

    rows = [np.full(n, source), np.arange(n)]
    cols = [np.arange(n), np.full(n, sink)]
    caps = [np.full(n, FLOW_SCALE, dtype=np.int64), cap_in]
    if cap_edge > 0:
        e = graph.edges
        rows += [e[:, 0], e[:, 1]]
        cols += [e[:, 1], e[:, 0]]
        caps += [np.full(len(e), cap_edge, dtype=np.int64)] * 2
    capacity = csr_matrix(
        (np.concatenate(caps), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n + 2, n + 2), dtype=np.int32)

    flow = maximum_flow(capacity, source, sink).flow
    residual = capacity - flow
    residual.data = (residual.data > 0).astype(np.int32)
    residual.eliminate_zeros()
    reachable = breadth_first_order(residual, source, directed=True,
                                    return_predecessors=False)
    inliers = reachable[(reachable >= 0) & (reachable < n)]
    return np.sort(inliers).astype(np.int64)


def gc_ransac_propose(corr: CorrespondenceSet, graph: NeighborhoodGraph,
                      camera: CameraIntrinsics, params: FittingParams,
                      rng: np.random.Generator,
                      stats: FitStats | None = None):
    """Best single-instance hypothesis from the sampling loop, or None.

    Minimal samples are screened for degeneracy, solved, sanity-checked and
    scored; each new best is locally optimized by alternating cut-selected
    inlier refits until the quality stops improving.
    """
    if len(corr) < SAMPLE_SIZE:
        return None
    ordering = prosac_ordering(corr, rng)
    best_pose = None
    best_q = 0.0
    seen: dict = {}  # sample -> was it degenerate (repeats cannot improve)

    for iteration in range(params.tau_i):
        sample = prosac_sample(ordering, iteration, rng, budget=params.sampling_budget)
        if stats is not None:
            stats.samples_drawn += 1
        key = tuple(sorted(sample))
        if key in seen:
            if seen[key] and stats is not None:
                stats.degenerate_samples += 1
            continue
        pix = corr.pixels[sample]
        pts = corr.points[sample]
        if not degeneracy_check(pix, pts, tau_t=params.tau_t):
            seen[key] = True
            if stats is not None:
                stats.degenerate_samples += 1
            continue
        try:
            candidates = p3p(pix, pts, camera)
        except DegenerateConfigurationError:
            seen[key] = True
            if stats is not None:
                stats.degenerate_samples += 1
            continue
        seen[key] = False
        improved = False
        for pose in candidates:
            if not pose_sanity(pose, pts):
                continue
            q = hypothesis_quality(pose, corr, camera, params.tau_r)
            if stats is not None:
                stats.hypotheses_scored += 1
            if q > best_q:
                best_pose, best_q = pose, q
                improved = True
        if improved:
            best_pose, best_q = _local_optimization(
                best_pose, best_q, corr, graph, camera, params)
        if best_q >= params.tau_q:
            break

    if best_pose is None:
        return None
    inliers = graph_cut_inliers(best_pose, corr, graph, camera,
                                params.tau_r, params.spatial_weight)
    return PoseHypothesis(best_pose, best_q, inliers, corr.object_id)


def _best_member_per_cell(corr, ids, residual_key):
    """One member per cell, the best-fitting one.

    Members of a cell are alternative explanations of the same pixel, not
    independent measurements.  Stacking them in a least-squares refit drags
    the solution toward the member centroid, which is fatal when symmetry
    ambiguity puts several nearby branches of one pixel inside tau_r.
    """
    order = np.argsort(residual_key, kind="stable")
    cells = corr.cells[ids[order]]
    _, first = np.unique(cells, return_index=True)
    return ids[order[first]]


def _local_optimization(pose, quality, corr, graph, camera, params, max_rounds=10):
    """Alternate cut-based inlier selection with non-minimal refitting."""
    for _ in range(max_rounds):
        inliers = graph_cut_inliers(pose, corr, graph, camera,
                                    params.tau_r, params.spatial_weight)
        if len(inliers) < 4:
            break
        # smoothness can pull cost-ceiling members into the cut; they carry
        # no gradient for the truncated objective but would dominate the
        # least-squares refit, so fit on the sub-threshold members only
        errors = reprojection_errors(pose, camera, corr.pixels[inliers],
                                     corr.points[inliers])
        solid = inliers[errors < params.tau_r]
        if len(solid) < 4:
            break
        solid = _best_member_per_cell(corr, solid,
                                      errors[errors < params.tau_r])
        if len(solid) < 4:
            break
        try:
            refit = epnp(corr.pixels[solid], corr.points[solid], camera)
        except (DegenerateConfigurationError, NoSolutionError):
            break
        refit = refine_lm(refit, corr.pixels[solid], corr.points[solid], camera)
        q = hypothesis_quality(refit, corr, camera, params.tau_r)
        if q <= quality:
            break
        pose, quality = refit, q
    return pose, quality


def pearl_energy(poses, assignment: np.ndarray, graph: NeighborhoodGraph,
                 camera: CameraIntrinsics, tau_r: float, spatial_weight: float,
                 label_cost: float) -> float:
    """Total explanation cost of a labeling.

    Sum of truncated data costs to assigned poses (unit cost for the
    outlier label), the smoothness weight per cross-label neighborhood
    edge, and the per-active-instance penalty.
    """
    corr = graph.correspondences
    assignment = np.asarray(assignment)
    if assignment.shape != (len(corr),):
        raise DimensionMismatchError("one label per correspondence required")
    energy = float(np.count_nonzero(assignment < 0))
    active = 0
    for k, pose in enumerate(poses):
        mask = assignment == k
        if not mask.any():
            continue
        active += 1
        costs = _inlier_costs(pose, corr, camera, tau_r)
        energy += float(costs[mask].sum())
    if len(graph.edges):
        cross = assignment[graph.edges[:, 0]] != assignment[graph.edges[:, 1]]
        energy += spatial_weight * float(np.count_nonzero(cross))
    energy += label_cost * active
    return energy


def _move_deltas(i, labels, counts, cost_rows, graph, spatial_weight, label_cost):
    """Exact energy change for moving node i to every label (index c+1)."""
    current = labels[i]
    deltas = cost_rows[:, i] - cost_rows[current + 1, i]
    if spatial_weight > 0.0:
        nbr = labels[graph.neighbors(i)]
        if len(nbr):
            hist = np.bincount(nbr + 1, minlength=cost_rows.shape[0])
            cross = len(nbr) - hist
            deltas = deltas + spatial_weight * (cross - cross[current + 1])
    if label_cost > 0.0 and len(counts):
        deltas = deltas.copy()
        deltas[1:][counts == 0] += label_cost  # activating a dormant label
        if current >= 0 and counts[current] == 1:
            # moving the last supporter away retires the label
            deltas -= label_cost
            deltas[current + 1] += label_cost
    return deltas


def _icm_assignment(cost_rows, labels, graph, spatial_weight, label_cost,
                    max_sweeps=20):
    """Single-node moves to a local labeling minimum; never raises energy.

    cost_rows is (K+1, N): row 0 the unit outlier cost, row k+1 the data
    cost under pose k.  Each sweep nominates promising nodes with a
    vectorised scan, then applies moves one at a time, re-validating the
    exact energy change against the labels and counts as they evolve.
    """
    n = cost_rows.shape[1]
    n_labels = cost_rows.shape[0] - 1
    labels = labels.copy()
    counts = np.bincount(labels[labels >= 0], minlength=n_labels)
    edges = graph.edges
    degrees = np.diff(graph.indptr)

    for _ in range(max_sweeps):
        scores = cost_rows.copy()
        if spatial_weight > 0.0 and len(edges):
            nbr_hist = np.zeros_like(scores)
            np.add.at(nbr_hist, (labels[edges[:, 1]] + 1, edges[:, 0]), 1.0)
            np.add.at(nbr_hist, (labels[edges[:, 0]] + 1, edges[:, 1]), 1.0)
            scores += spatial_weight * (degrees[None, :] - nbr_hist)
        if label_cost > 0.0 and n_labels:
            scores[1:][counts == 0] += label_cost
        node_ids = np.arange(n)
        gain = scores.min(axis=0) - scores[labels + 1, node_ids]
        movers = np.flatnonzero(gain < -1e-12)
        if label_cost > 0.0 and n_labels:
            # retiring refunds are invisible to the scan above
            lonely = np.flatnonzero((labels >= 0) & (counts[np.maximum(labels, 0)] == 1))
            movers = np.union1d(movers, lonely)

        applied = False
        for i in movers:
            deltas = _move_deltas(i, labels, counts, cost_rows, graph,
                                  spatial_weight, label_cost)
            best = int(np.argmin(deltas))
            if deltas[best] < -1e-12 and best != labels[i] + 1:
                if labels[i] >= 0:
                    counts[labels[i]] -= 1
                if best - 1 >= 0:
                    counts[best - 1] += 1
                labels[i] = best - 1
                applied = True
        if not applied:
            break
    return labels


def _cost_rows(poses, corr, camera, tau_r):
    rows = np.ones((len(poses) + 1, len(corr)))
    for k, pose in enumerate(poses):
        rows[k + 1] = _inlier_costs(pose, corr, camera, tau_r)
    return rows


def _labeling_energy(cost_rows, labels, graph, spatial_weight, label_cost):
    """pearl_energy evaluated from precomputed data costs."""
    n = cost_rows.shape[1]
    energy = float(cost_rows[labels + 1, np.arange(n)].sum())
    if spatial_weight > 0.0 and len(graph.edges):
        cross = labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]]
        energy += spatial_weight * float(np.count_nonzero(cross))
    energy += label_cost * len(np.unique(labels[labels >= 0]))
    return energy


def _expansion_move(cost_rows, labels, alpha, graph, spatial_weight):
    """Exact binary expansion for one label: each node keeps its label or
    switches to alpha, minimizing data plus cross-label smoothness.

    Unlike single-node sweeps this moves whole regions at once, which
    matters when every first flip is blocked by its still-unmoved
    neighbors.  Label activation costs are not modeled here; the caller
    guards acceptance with the exact energy.
    """
    n = cost_rows.shape[1]
    node = np.arange(n)
    cost_keep = cost_rows[labels + 1, node].copy()
    cost_switch = cost_rows[alpha + 1].copy()

    if spatial_weight <= 0.0 or len(graph.edges) == 0:
        switch = cost_switch < cost_keep - 1e-15
        new_labels = labels.copy()
        new_labels[switch] = alpha
        return new_labels

    p, q = graph.edges[:, 0], graph.edges[:, 1]
    lp, lq = labels[p], labels[q]
    live = ~((lp == alpha) & (lq == alpha))
    p, q, lp, lq = p[live], q[live], lp[live], lq[live]
    w = spatial_weight
    e00 = w * (lp != lq)
    e01 = w * (lp != alpha)
    e10 = w * (lq != alpha)
    # decompose E into unary shifts plus a directed p->q term (submodular)
    d = e01 - e00
    np.add.at(cost_switch, q, np.maximum(d, 0.0))
    np.add.at(cost_keep, q, np.maximum(-d, 0.0))
    np.add.at(cost_keep, p, e01)
    c = e10 + e01 - e00

    source, sink = n, n + 1
    # int32 totals stay well under 2^31 for the correspondence counts the
    # extractor can produce; int64 capacities silently break maximum_flow
    cap_keep = np.rint(cost_keep * FLOW_SCALE).astype(np.int64)
    cap_switch = np.rint(cost_switch * FLOW_SCALE).astype(np.int64)
    cap_pair = np.rint(c * FLOW_SCALE).astype(np.int64)
    rows = [np.full(n, source), node, p]
    cols = [node, np.full(n, sink), q]
    caps = [cap_keep, cap_switch, cap_pair]
    capacity = csr_matrix(
        (np.concatenate(caps), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n + 2, n + 2), dtype=np.int32)
    flow = maximum_flow(capacity, source, sink).flow
    residual = capacity - flow
    residual.data = (residual.data > 0).astype(np.int32)
    residual.eliminate_zeros()
    reachable = breadth_first_order(residual, source, directed=True,
                                    return_predecessors=False)
    switch = np.zeros(n, dtype=bool)
    switch[reachable[(reachable >= 0) & (reachable < n)]] = True

    new_labels = labels.copy()
    new_labels[switch] = alpha
    return new_labels


def _expansion_assignment(cost_rows, labels, graph, spatial_weight, label_cost,
                          max_passes=6):
    """Sweep expansion moves over every label until none helps."""
    n_labels = cost_rows.shape[0] - 1
    labels = labels.copy()
    energy = _labeling_energy(cost_rows, labels, graph, spatial_weight, label_cost)
    for _ in range(max_passes):
        improved = False
        for alpha in range(-1, n_labels):
            trial = _expansion_move(cost_rows, labels, alpha, graph, spatial_weight)
            trial_energy = _labeling_energy(cost_rows, trial, graph,
                                            spatial_weight, label_cost)
            if trial_energy < energy - 1e-12:
                labels, energy = trial, trial_energy
                improved = True
        if not improved:
            break
    return labels


def progressive_x(corr: CorrespondenceSet, camera: CameraIntrinsics,
                  params: FittingParams,
                  expected_instances: int | None = None) -> list:
    """Sequential proposal and energy-guarded maintenance of instances.

    Each round proposes a hypothesis on the correspondences the current
    labeling leaves unexplained, tentatively adds it, re-optimizes the
    assignment and the poses, and keeps the candidate only if the total
    energy dropped.  Hypotheses explaining fewer than 3 correspondences
    are dropped.  Stops when a proposal fails to lower the energy, the
    expected instance count is reached, or the instance cap is hit.
    """
    if len(corr) == 0:
        return []
    rng = np.random.default_rng(params.rng_seed)
    graph = build_neighborhood_graph(corr, params.tau_d)
    labels = np.full(len(corr), -1, dtype=np.int64)
    poses: list[Pose] = []
    energy = pearl_energy(poses, labels, graph, camera, params.tau_r,
                          params.spatial_weight, params.label_cost)

    instance_cap = expected_instances if expected_instances is not None else params.max_instances
    for _round in range(4 * params.max_instances):
        if len(poses) >= instance_cap:
            break
        unexplained = np.flatnonzero(labels < 0)
        if len(unexplained) < SAMPLE_SIZE:
            break
        sub = corr.subset(unexplained)
        sub_graph = build_neighborhood_graph(sub, params.tau_d)
        proposal = gc_ransac_propose(sub, sub_graph, camera, params, rng)
        if proposal is None:
            break

        trial_poses = poses + [proposal.pose]
        cost_rows = _cost_rows(trial_poses, corr, camera, params.tau_r)
        trial_labels = labels.copy()
        cand = len(trial_poses) - 1
        current_cost = cost_rows[trial_labels + 1, np.arange(len(corr))]
        take = cost_rows[cand + 1] < current_cost
        trial_labels[take] = cand

        trial_poses, trial_labels, trial_energy = _pearl_alternation(
            trial_poses, trial_labels, cost_rows, graph, camera, params)

        if trial_energy < energy - 1e-12:
            poses, labels, energy = trial_poses, trial_labels, trial_energy
        else:
            break

    out = []
    for k, pose in enumerate(poses):
        ids = np.flatnonzero(labels == k).astype(np.int64)
        q = hypothesis_quality(pose, corr, camera, params.tau_r)
        out.append(PoseHypothesis(pose, q, ids, corr.object_id))
    out.sort(key=lambda h: -h.quality)
    return out


def _pearl_alternation(poses, labels, cost_rows, graph, camera, params,
                       max_rounds=5):
    """Alternate assignment, refitting and pruning; energy never rises."""
    corr = graph.correspondences
    poses = list(poses)
    energy = pearl_energy(poses, labels, graph, camera, params.tau_r,
                          params.spatial_weight, params.label_cost)
    for _ in range(max_rounds):
        # region-sized expansion moves first (single-node sweeps stall when
        # every first flip is surrounded by unmoved neighbors), then an ICM
        # mop-up for the label-retirement refunds expansion does not model
        labels = _expansion_assignment(cost_rows, labels, graph,
                                       params.spatial_weight, params.label_cost)
        labels = _icm_assignment(cost_rows, labels, graph,
                                 params.spatial_weight, params.label_cost)
        after_icm = pearl_energy(poses, labels, graph, camera, params.tau_r,
                                 params.spatial_weight, params.label_cost)
        assert after_icm <= energy + ENERGY_SLACK

        # refit each pose on its assigned support, one member per cell so
        # co-assigned symmetry branches cannot drag the fit off its branch;
        # keep only non-worsening fits
        for k, pose in enumerate(poses):
            ids = np.flatnonzero(labels == k)
            if len(ids) < 4:
                continue
            fit_ids = _best_member_per_cell(corr, ids, cost_rows[k + 1, ids])
            if len(fit_ids) < 4:
                continue
            try:
                refit = epnp(corr.pixels[fit_ids], corr.points[fit_ids], camera)
            except (DegenerateConfigurationError, NoSolutionError):
                continue
            refit = refine_lm(refit, corr.pixels[fit_ids], corr.points[fit_ids],
                              camera)
            new_costs = _inlier_costs(refit, corr, camera, params.tau_r)
            if new_costs[ids].sum() <= cost_rows[k + 1, ids].sum() + 1e-12:
                poses[k] = refit
                cost_rows[k + 1] = new_costs
        after_refit = pearl_energy(poses, labels, graph, camera, params.tau_r,
                                   params.spatial_weight, params.label_cost)
        assert after_refit <= after_icm + ENERGY_SLACK

        # drop starved hypotheses and compact the labeling; with the default
        # instance penalty this always pays, but it is a support-hygiene rule
        # rather than an energy move, so it sits outside the assertions
        counts = np.bincount(labels[labels >= 0], minlength=len(poses))
        keep = np.flatnonzero(counts >= 3)
        if len(keep) < len(poses):
            remap = -np.ones(len(poses) + 1, dtype=np.int64)
            remap[keep + 1] = np.arange(len(keep))
            labels = remap[labels + 1]
            poses = [poses[k] for k in keep]
            cost_rows = np.concatenate([cost_rows[:1], cost_rows[keep + 1]])

        new_energy = pearl_energy(poses, labels, graph, camera, params.tau_r,
                                  params.spatial_weight, params.label_cost)
        stalled = new_energy > energy - 1e-9
        energy = new_energy
        if stalled:
            break
    return poses, labels, energy
