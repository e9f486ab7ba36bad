"""Pose solvers: minimal 3-point, n-point, and iterative refinement.

All solvers take pixel observations (N, 2), model-frame points (N, 3) in mm
and a pinhole camera, and produce poses mapping model to camera frame.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    NonFiniteInputError,
    NoSolutionError,
    TooFewCorrespondencesError,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    axis_angle_to_matrix,
    project_safe,
    skew,
)

P3P_REPROJECTION_TOL = 1e-6  # px, every returned solution must interpolate
DEFAULT_TAU_T = 100.0  # px^2, minimal-sample triangle area threshold
COLLINEARITY_TOL = 1e-6


def _check_inputs(pixels, points, minimum):
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise DimensionMismatchError("pixels must be (N, 2)")
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionMismatchError("points must be (N, 3)")
    if len(pixels) != len(points):
        raise DimensionMismatchError("pixels and points must pair up")
    if len(pixels) < minimum:
        raise TooFewCorrespondencesError(f"need at least {minimum} correspondences")
    if not (np.all(np.isfinite(pixels)) and np.all(np.isfinite(points))):
        raise NonFiniteInputError("solver inputs contain non-finite values")
    return pixels, points


def bearing_vectors(camera: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit rays through the pixels, camera frame."""
    d = np.column_stack([
        (pixels[:, 0] - camera.cx) / camera.fx,
        (pixels[:, 1] - camera.cy) / camera.fy,
        np.ones(len(pixels)),
    ])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _mean_reprojection(pose, camera, pixels, points):
    uv, in_front = project_safe(camera, pose.transform(points))
    if not in_front.all():
        return np.inf
    return float(np.linalg.norm(uv - pixels, axis=1).max())


def p3p(pixels: np.ndarray, points: np.ndarray, camera: CameraIntrinsics):
    """Minimal absolute pose from 3 correspondences.

    Solves the quartic parametrisation of the 3-point problem and returns
    every real solution (at most 4) that reprojects the sample within
    P3P_REPROJECTION_TOL and keeps it in front of the camera.

    Returns:
        list of Pose, possibly empty.

    Raises:
        DegenerateConfigurationError: collinear 3D points.
    """
    pixels, points = _check_inputs(pixels, points, 3)
    if len(pixels) != 3:
        raise DimensionMismatchError("the minimal solver takes exactly 3 correspondences")

    f = bearing_vectors(camera, pixels)
    p_world = points.copy()
    if np.linalg.norm(np.cross(p_world[1] - p_world[0], p_world[2] - p_world[0])) < 1e-9:
        raise DegenerateConfigurationError("3D points are collinear")

    f1, f2, f3 = f
    p1w, p2w, p3w = p_world

    def intermediate(f1, f2):
        e1 = f1
        e3 = np.cross(f1, f2)
        n = np.linalg.norm(e3)
        if n < 1e-12:
            return None
        e3 = e3 / n
        return np.stack([e1, np.cross(e3, e1), e3])

    t_frame = intermediate(f1, f2)
    if t_frame is None:
        return []
    if (t_frame @ f3)[2] > 0.0:
        # swap the first two correspondences so theta stays in [0, pi]
        f1, f2 = f2, f1
        p1w, p2w = p2w, p1w
        t_frame = intermediate(f1, f2)
        if t_frame is None:
            return []
    f3_t = t_frame @ f3

    n1 = p2w - p1w
    n1 = n1 / np.linalg.norm(n1)
    n3 = np.cross(n1, p3w - p1w)
    n3 = n3 / np.linalg.norm(n3)
    n_frame = np.stack([n1, np.cross(n3, n1), n3])

    p3_n = n_frame @ (p3w - p1w)
    d12 = float(np.linalg.norm(p2w - p1w))
    phi1 = f3_t[0] / f3_t[2]
    phi2 = f3_t[1] / f3_t[2]
    p1c, p2c = p3_n[0], p3_n[1]

    cos_beta = float(f1 @ f2)
    denom = 1.0 - cos_beta * cos_beta
    if denom < 1e-15:
        return []
    b = np.sign(cos_beta) * np.sqrt(1.0 / denom - 1.0)  # cot(beta)

    phi1_2 = phi1 * phi1
    phi2_2 = phi2 * phi2
    p1_2 = p1c * p1c
    p1_3 = p1_2 * p1c
    p1_4 = p1_3 * p1c
    p2_2 = p2c * p2c
    p2_3 = p2_2 * p2c
    p2_4 = p2_3 * p2c
    d12_2 = d12 * d12
    b_2 = b * b

    a4 = -phi2_2 * p2_4 - p2_4 * phi1_2 - p2_4
    a3 = (2 * p2_3 * d12 * b
          + 2 * phi2_2 * p2_3 * d12 * b
          - 2 * phi2 * p2_3 * phi1 * d12)
    a2 = (-phi2_2 * p2_2 * p1_2
          - phi2_2 * p2_2 * d12_2 * b_2
          - phi2_2 * p2_2 * d12_2
          + phi2_2 * p2_4
          + p2_4 * phi1_2
          + 2 * p1c * p2_2 * d12
          + 2 * phi1 * phi2 * p1c * p2_2 * d12 * b
          - p2_2 * p1_2 * phi1_2
          + 2 * p1c * p2_2 * phi2_2 * d12
          - p2_2 * d12_2 * b_2
          - 2 * p1_2 * p2_2)
    a1 = (2 * p1_2 * p2c * d12 * b
          + 2 * phi2 * p2_3 * phi1 * d12
          - 2 * phi2_2 * p2_3 * d12 * b
          - 2 * p1c * p2c * d12_2 * b)
    a0 = (-2 * phi2 * p2_2 * phi1 * p1c * d12 * b
          + phi2_2 * p2_2 * d12_2
          + 2 * p1_3 * d12
          - p1_2 * d12_2
          + phi2_2 * p2_2 * p1_2
          - p1_4
          - 2 * phi2_2 * p2_2 * p1c * d12
          + p2_2 * phi1_2 * p1_2
          + phi2_2 * p2_2 * d12_2 * b_2)

    coeffs = np.array([a4, a3, a2, a1, a0])
    if not np.all(np.isfinite(coeffs)) or abs(a4) < 1e-300:
        return []
    roots = np.roots(coeffs)

    def newton(x):
        # polish the companion-matrix root to full double precision; a single
        # step leaves ~1e-8 rad orientation error on the worst tail
        for _ in range(5):
            fval = (((a4 * x + a3) * x + a2) * x + a1) * x + a0
            fder = ((4 * a4 * x + 3 * a3) * x + 2 * a2) * x + a1
            if fder == 0.0:
                break
            step = fval / fder
            x -= step
            if abs(step) < 1e-16 * max(1.0, abs(x)):
                break
        return x

    cos_thetas = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        ct = newton(float(root.real))
        if abs(ct) > 1.0 + 1e-9:
            continue
        ct = float(np.clip(ct, -1.0, 1.0))
        if all(abs(ct - seen) > 1e-10 for seen in cos_thetas):
            cos_thetas.append(ct)

    solutions = []
    for ct in cos_thetas:
        st = np.sqrt(max(0.0, 1.0 - ct * ct))
        den = -phi1 * ct * p2c / phi2 + p1c - d12
        if abs(den) < 1e-15:
            continue
        cot_alpha = (-phi1 * p1c / phi2 - ct * p2c + d12 * b) / den
        sin_alpha = np.sqrt(1.0 / (cot_alpha * cot_alpha + 1.0))
        cos_alpha = np.sqrt(max(0.0, 1.0 - sin_alpha * sin_alpha))
        if cot_alpha < 0.0:
            cos_alpha = -cos_alpha

        scale = d12 * (sin_alpha * b + cos_alpha)
        center_int = np.array([scale * cos_alpha, scale * sin_alpha * ct, scale * sin_alpha * st])
        center = p1w + n_frame.T @ center_int

        q = np.array([
            [-cos_alpha, -sin_alpha * ct, -sin_alpha * st],
            [sin_alpha, -cos_alpha * ct, -cos_alpha * st],
            [0.0, -st, ct],
        ])
        rot_cam_to_world = n_frame.T @ q.T @ t_frame
        rot = rot_cam_to_world.T
        pose = Pose(rot, -rot @ center)

        if not pose_sanity(pose, points):
            continue
        pose = _interpolation_polish(pose, camera, pixels, points)
        if _mean_reprojection(pose, camera, pixels, points) < P3P_REPROJECTION_TOL:
            solutions.append(pose)
    return solutions


def _interpolation_polish(pose, camera, pixels, points, iters=2):
    """Newton steps on the exactly-determined sample system.

    The quartic backsubstitution loses a few digits through the cotangent
    chain; driving the sample reprojection to machine precision keeps the
    orientation error of returned solutions below 1e-9 rad.
    """
    for _ in range(iters):
        res = reprojection_residuals(pose, camera, pixels, points)
        if not np.all(np.isfinite(res)) or np.abs(res).max() < 1e-12:
            break
        jac = reprojection_jacobian(pose, camera, points)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        trial = Pose(axis_angle_to_matrix(step[:3]) @ pose.rotation,
                     pose.translation + step[3:])
        trial_res = reprojection_residuals(trial, camera, pixels, points)
        if not np.all(np.isfinite(trial_res)) or (trial_res @ trial_res) >= (res @ res):
            break
        pose = trial
    return pose


def _kabsch(src, dst):
    """Proper rigid alignment src -> dst (rotation + translation)."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, c_dst - r @ c_src


def _betas_from_distances(kernel_cols, ctrl_dist2, all_subsets=False):
    """Closed-form beta guesses for kernel dimensions 1..3.

    With all_subsets the one/two/three-direction cases run on every subset
    of kernel columns of that size; on minimal inputs the null space is
    wide and the true solution need not favour the leading eigenvectors,
    so the extra starting points keep the refinement out of bad basins.
    Otherwise only the leading columns are used, as in the overdetermined
    setting where the eigenvalue ordering is informative.
    """
    from itertools import combinations

    n_ctrl = kernel_cols.shape[0] // 3
    n_cols = kernel_cols.shape[1]
    pairs = [(i, j) for i in range(n_ctrl) for j in range(i + 1, n_ctrl)]
    vs = [kernel_cols[:, k].reshape(n_ctrl, 3) for k in range(n_cols)]
    diffs = [np.array([v[i] - v[j] for i, j in pairs]) for v in vs]
    guesses = []

    def subsets(size):
        if all_subsets:
            return combinations(range(n_cols), size)
        return [tuple(range(size))] if n_cols >= size else []

    def emit(cols, values):
        full = np.zeros(n_cols)
        full[list(cols)] = values
        guesses.append(full)

    for (k,) in subsets(1):
        # N = 1: single direction, scale from the distance ratio
        denom = (diffs[k] * diffs[k]).sum()
        if denom > 0:
            emit((k,), [np.sqrt(np.abs(ctrl_dist2).sum() / denom)])

    for k, l in subsets(2):
        # N = 2: unknowns beta1^2, beta1*beta2, beta2^2
        rows = np.column_stack([
            (diffs[k] * diffs[k]).sum(axis=1),
            2.0 * (diffs[k] * diffs[l]).sum(axis=1),
            (diffs[l] * diffs[l]).sum(axis=1),
        ])
        sol, *_ = np.linalg.lstsq(rows, ctrl_dist2, rcond=None)
        b11, b12, b22 = sol
        if b11 >= 0:
            b1 = np.sqrt(b11)
            b2 = b12 / b1 if b1 > 1e-12 else np.sqrt(max(b22, 0.0))
        else:
            b1 = 0.0
            b2 = np.sqrt(max(-b22, 0.0))
        emit((k, l), [b1, b2])
        if all_subsets:
            # the refinement objective is even in the betas, so only the
            # relative signs matter; flipping the trailing component covers
            # the basin the closed-form sign guess can miss
            emit((k, l), [b1, -b2])

    for k, l, m in subsets(3):
        # N = 3: all six quadratic terms of three betas
        rows = np.column_stack([
            (diffs[k] * diffs[k]).sum(axis=1),
            2.0 * (diffs[k] * diffs[l]).sum(axis=1),
            (diffs[l] * diffs[l]).sum(axis=1),
            2.0 * (diffs[k] * diffs[m]).sum(axis=1),
            2.0 * (diffs[l] * diffs[m]).sum(axis=1),
            (diffs[m] * diffs[m]).sum(axis=1),
        ])
        sol, *_ = np.linalg.lstsq(rows, ctrl_dist2, rcond=None)
        b11, b12, b22, b13, b23, b33 = sol
        b1 = np.sqrt(abs(b11))
        sign2 = np.sign(b12) if b12 != 0 else 1.0
        b2 = sign2 * np.sqrt(abs(b22))
        sign3 = np.sign(b13) if b13 != 0 else 1.0
        b3 = sign3 * np.sqrt(abs(b33))
        emit((k, l, m), [b1, b2, b3])
        if all_subsets:
            emit((k, l, m), [b1, -b2, b3])
            emit((k, l, m), [b1, b2, -b3])
            emit((k, l, m), [b1, -b2, -b3])
    return guesses


def _gauss_newton_betas(kernel_cols, betas, ctrl_dist2, iters=30):
    """Refine betas so camera control point distances match the model."""
    n_ctrl = kernel_cols.shape[0] // 3
    idx_i, idx_j = np.triu_indices(n_ctrl, k=1)
    vs = kernel_cols.reshape(n_ctrl, 3, -1)
    pair_dirs = vs[idx_i] - vs[idx_j]  # (pairs, 3, n_betas)
    betas = betas.copy()
    for _ in range(iters):
        d = pair_dirs @ betas  # (pairs, 3)
        resid = (d * d).sum(axis=1) - ctrl_dist2
        if np.linalg.norm(resid) < 1e-14:
            break
        jac = 2.0 * np.einsum("pc,pck->pk", d, pair_dirs)
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        betas = betas + step
        if np.linalg.norm(step) < 1e-14:
            break
    return betas


def epnp(pixels: np.ndarray, points: np.ndarray, camera: CameraIntrinsics) -> Pose:
    """Non-iterative n-point pose (n >= 4) via 4 virtual control points.

    Coplanar inputs fall back to a 3-control-point parametrisation.

    Raises:
        TooFewCorrespondencesError: fewer than 4 correspondences.
        DegenerateConfigurationError: collinear or coincident points.
        NoSolutionError: no candidate kept the scene in front of the camera.
    """
    pixels, points = _check_inputs(pixels, points, 4)
    n = len(points)

    centroid = points.mean(axis=0)
    centered = points - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[0] < 1e-12 or svals[1] / svals[0] < 1e-10:
        raise DegenerateConfigurationError("points are collinear or coincident")
    planar = svals[2] / svals[0] < 1e-8

    if planar:
        dirs = vt[:2]
        ctrl_w = np.vstack([
            centroid,
            centroid + dirs[0] * svals[0] / np.sqrt(n),
            centroid + dirs[1] * svals[1] / np.sqrt(n),
        ])
    else:
        ctrl_w = np.vstack([
            centroid,
            centroid + vt[0] * svals[0] / np.sqrt(n),
            centroid + vt[1] * svals[1] / np.sqrt(n),
            centroid + vt[2] * svals[2] / np.sqrt(n),
        ])
    n_ctrl = len(ctrl_w)

    # barycentric coordinates of every point w.r.t. the control points
    basis = np.vstack([ctrl_w.T, np.ones(n_ctrl)])  # (4, n_ctrl)
    target = np.vstack([points.T, np.ones(n)])  # (4, n)
    alphas, *_ = np.linalg.lstsq(basis, target, rcond=None)
    alphas = alphas.T  # (n, n_ctrl)

    m_mat = np.zeros((2 * n, 3 * n_ctrl))
    for j in range(n_ctrl):
        a = alphas[:, j]
        m_mat[0::2, 3 * j] = a * camera.fx
        m_mat[0::2, 3 * j + 2] = a * (camera.cx - pixels[:, 0])
        m_mat[1::2, 3 * j + 1] = a * camera.fy
        m_mat[1::2, 3 * j + 2] = a * (camera.cy - pixels[:, 1])

    _, evecs = np.linalg.eigh(m_mat.T @ m_mat)
    kernel = evecs[:, : (4 if not planar else 3)]  # ascending eigenvalues

    pairs = [(i, j) for i in range(n_ctrl) for j in range(i + 1, n_ctrl)]
    ctrl_dist2 = np.array([(ctrl_w[i] - ctrl_w[j]) @ (ctrl_w[i] - ctrl_w[j]) for i, j in pairs])

    best = None
    best_err = np.inf
    seen = set()
    # the minimal/near-minimal system is underdetermined, so seed the
    # refinement from every kernel-column subset instead of the leading ones
    for guess in _betas_from_distances(kernel, ctrl_dist2, all_subsets=n < 6):
        # refine over the whole kernel; the case guess only seeds it
        betas = _gauss_newton_betas(kernel, guess, ctrl_dist2)
        if not np.all(np.isfinite(betas)):
            continue
        key = tuple(np.round(betas, 9))
        if key in seen:
            continue
        seen.add(key)
        ctrl_c = (kernel @ betas).reshape(n_ctrl, 3)
        pts_c = alphas @ ctrl_c
        if pts_c[:, 2].mean() < 0:
            pts_c = -pts_c
        rot, tra = _kabsch(points, pts_c)
        pose = Pose(rot, tra)
        err = _mean_reprojection(pose, camera, pixels, points)
        if err < best_err:
            best, best_err = pose, err
        if best_err < 1e-9:
            break

    if best is None or not np.isfinite(best_err):
        raise NoSolutionError("no pose kept every point in front of the camera")
    return best


def reprojection_residuals(pose: Pose, camera: CameraIntrinsics,
                           pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Stacked (2N,) residuals (projected - observed), inf behind camera."""
    cam_pts = pose.transform(points)
    uv, in_front = project_safe(camera, cam_pts)
    res = (uv - pixels).reshape(-1)
    if not in_front.all():
        bad = np.repeat(~in_front, 2)
        res[bad] = np.inf
    return res

# solver publics continue below


def reprojection_jacobian(pose: Pose, camera: CameraIntrinsics,
                          points: np.ndarray) -> np.ndarray:
    """Analytic (2N, 6) Jacobian of the residuals w.r.t. a local pose
    increment [axis-angle, translation] applied as R <- exp(w) R, t <- t + dt."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    y = points @ pose.rotation.T  # rotated, before translation
    p = y + pose.translation
    z = p[:, 2]
    jac = np.empty((2 * n, 6))
    inv_z = 1.0 / z
    du_dp = np.zeros((n, 3))
    dv_dp = np.zeros((n, 3))
    du_dp[:, 0] = camera.fx * inv_z
    du_dp[:, 2] = -camera.fx * p[:, 0] * inv_z * inv_z
    dv_dp[:, 1] = camera.fy * inv_z
    dv_dp[:, 2] = -camera.fy * p[:, 1] * inv_z * inv_z
    for i in range(n):
        dp_dw = -skew(y[i])
        jac[2 * i, :3] = du_dp[i] @ dp_dw
        jac[2 * i, 3:] = du_dp[i]
        jac[2 * i + 1, :3] = dv_dp[i] @ dp_dw
        jac[2 * i + 1, 3:] = dv_dp[i]
    return jac


def refine_lm(pose: Pose, pixels: np.ndarray, points: np.ndarray,
              camera: CameraIntrinsics, max_iterations: int = 50,
              initial_damping: float = 1e-3) -> Pose:
    """Damped least-squares refinement of the reprojection objective.

    The rotation update is a local axis-angle increment composed onto the
    current rotation, so iterates stay on the manifold without explicit
    re-orthonormalisation.  Damping is multiplicative: rejected steps raise
    it tenfold, accepted steps lower it tenfold.  The returned pose never
    has a larger objective than the input.

    Raises:
        TooFewCorrespondencesError: fewer than 3 correspondences.
    """
    pixels, points = _check_inputs(pixels, points, 3)
    res = reprojection_residuals(pose, camera, pixels, points)
    if not np.all(np.isfinite(res)):
        # starting point is invalid; nothing better to return safely
        return pose
    cost = float(res @ res)
    lam = initial_damping
    current = pose

    for _ in range(max_iterations):
        jac = reprojection_jacobian(current, camera, points)
        grad = jac.T @ res
        hess = jac.T @ jac
        if np.linalg.norm(grad) < 1e-14:
            break
        accepted = False
        while lam <= 1e12:
            try:
                step = np.linalg.solve(hess + lam * np.eye(6), -grad)
            except np.linalg.LinAlgError:
                break
            trial = Pose(axis_angle_to_matrix(step[:3]) @ current.rotation,
                         current.translation + step[3:])
            trial_res = reprojection_residuals(trial, camera, pixels, points)
            trial_cost = float(trial_res @ trial_res) if np.all(np.isfinite(trial_res)) else np.inf
            if trial_cost < cost:
                improvement = cost - trial_cost
                current, res, cost = trial, trial_res, trial_cost
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if improvement < 1e-12 * (1.0 + cost):
                    return current
                break
            lam *= 10.0
        if not accepted:
            break
    return current


def degeneracy_check(pixels: np.ndarray, points: np.ndarray,
                     tau_t: float = DEFAULT_TAU_T,
                     collinearity_tol: float = COLLINEARITY_TOL) -> bool:
    """True iff a minimal sample is well conditioned.

    Rejects samples whose projected triangle area falls below tau_t (px^2)
    and samples whose 3D points are nearly collinear (ratio of the second
    to first principal extent below collinearity_tol).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if pixels.shape != (3, 2) or points.shape != (3, 3):
        raise DimensionMismatchError("degeneracy check takes a 3-point sample")

    d1 = pixels[1] - pixels[0]
    d2 = pixels[2] - pixels[0]
    area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
    if area < tau_t:
        return False

    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[0] <= 0.0 or svals[1] / svals[0] < collinearity_tol:
        return False
    return True


def pose_sanity(pose: Pose, points: np.ndarray) -> bool:
    """True iff the rotation is proper and all points land in front."""
    if not np.all(np.isfinite(pose.rotation)) or not np.all(np.isfinite(pose.translation)):
        return False
    if np.linalg.det(pose.rotation) < 0.0:
        return False
    z = pose.transform(points)[..., 2]
    return bool(np.all(z > 0.0))
