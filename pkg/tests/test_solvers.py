import numpy as np
import pytest

from fragpose.errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    TooFewCorrespondencesError,
)
from fragpose.geometry import (
    CameraIntrinsics,
    Pose,
    project,
    rotation_about_axis,
    rotation_angle_between,
    rotation_is_valid,
)
from fragpose.solvers import (
    degeneracy_check,
    epnp,
    p3p,
    pose_sanity,
    refine_lm,
    reprojection_jacobian,
    reprojection_residuals,
)


def random_pose(rng, z_range=(600.0, 1500.0)):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = rotation_about_axis(axis, rng.uniform(0.0, np.pi))
    tra = np.array([
        rng.uniform(-100.0, 100.0),
        rng.uniform(-100.0, 100.0),
        rng.uniform(*z_range),
    ])
    return Pose(rot, tra)


def sample_scene(rng, n_points, planar=False):
    """Pose + points + exact pixels, everything safely in front."""
    while True:
        pose = random_pose(rng)
        pts = rng.uniform(-150.0, 150.0, size=(n_points, 3))
        if planar:
            pts[:, 2] = 0.0
        cam_pts = pose.transform(pts)
        if np.all(cam_pts[:, 2] > 100.0):
            return pose, pts


class TestP3P:

    def test_recovers_generating_pose(self, vga):
        # projection oracle: the generating pose must appear among solutions
        rng = np.random.default_rng(2024)
        trials = 0
        while trials < 1000:
            pose, pts = sample_scene(rng, 3)
            if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) < 1e3:
                continue
            pix = project(vga, pose.transform(pts))
            solutions = p3p(pix, pts, vga)
            assert len(solutions) <= 4
            best_rot = np.inf
            best_tra = np.inf
            for sol in solutions:
                ang = rotation_angle_between(sol.rotation, pose.rotation)
                if ang < best_rot:
                    best_rot = ang
                    best_tra = np.linalg.norm(sol.translation - pose.translation)
            assert best_rot < 1e-9
            assert best_tra < 1e-6
            trials += 1

    def test_solutions_interpolate_and_pass_sanity(self, vga):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 300:
            pose, pts = sample_scene(rng, 3)
            if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) < 1e3:
                continue
            pix = project(vga, pose.transform(pts))
            for sol in p3p(pix, pts, vga):
                uv = project(vga, sol.transform(pts))
                assert np.linalg.norm(uv - pix, axis=1).max() < 1e-6
                assert sol.is_valid()
                assert pose_sanity(sol, pts)
            checked += 1

    def test_relabeling_leaves_solution_set(self, vga):
        rng = np.random.default_rng(31)
        for _ in range(50):
            pose, pts = sample_scene(rng, 3)
            if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) < 1e3:
                continue
            pix = project(vga, pose.transform(pts))
            base = p3p(pix, pts, vga)
            perm = rng.permutation(3)
            other = p3p(pix[perm], pts[perm], vga)
            assert len(base) == len(other)
            for sol in base:
                dists = [rotation_angle_between(sol.rotation, o.rotation)
                         + np.linalg.norm(sol.translation - o.translation)
                         for o in other]
                assert min(dists) < 1e-9

    def test_collinear_points_raise(self, vga):
        pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
        pix = np.array([[100.0, 100.0], [200.0, 150.0], [300.0, 220.0]])
        with pytest.raises(DegenerateConfigurationError):
            p3p(pix, pts, vga)

    def test_wrong_sample_size(self, vga):
        pts4 = np.zeros((4, 3))
        pix4 = np.zeros((4, 2))
        with pytest.raises(DimensionMismatchError):
            p3p(pix4, pts4, vga)
        with pytest.raises(TooFewCorrespondencesError):
            p3p(np.zeros((2, 2)), np.zeros((2, 3)), vga)


class TestEPnP:

    def test_recovers_pose_ten_points(self, vga):
        rng = np.random.default_rng(11)
        for _ in range(200):
            pose, pts = sample_scene(rng, 10)
            pix = project(vga, pose.transform(pts))
            est = epnp(pix, pts, vga)
            assert rotation_angle_between(est.rotation, pose.rotation) < 1e-6
            assert np.linalg.norm(est.translation - pose.translation) < 1e-3

    def test_minimal_four_points_interpolate(self, vga):
        rng = np.random.default_rng(13)
        for _ in range(200):
            pose, pts = sample_scene(rng, 4)
            pix = project(vga, pose.transform(pts))
            est = epnp(pix, pts, vga)
            uv = project(vga, est.transform(pts))
            assert np.linalg.norm(uv - pix, axis=1).max() < 1e-6

    def test_planar_fallback(self, vga):
        # all points on one plane, like a rendered box face
        rng = np.random.default_rng(17)
        for _ in range(200):
            pose, pts = sample_scene(rng, 12, planar=True)
            pix = project(vga, pose.transform(pts))
            est = epnp(pix, pts, vga)
            assert rotation_angle_between(est.rotation, pose.rotation) < 1e-5
            assert np.linalg.norm(est.translation - pose.translation) < 1e-2

    def test_rigid_equivariance(self, vga):
        # remapping the model frame by Q remaps the pose by Q inverse
        rng = np.random.default_rng(19)
        for _ in range(20):
            pose, pts = sample_scene(rng, 10)
            pix = project(vga, pose.transform(pts))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            q_rot = rotation_about_axis(axis, rng.uniform(0.0, np.pi))
            q_tra = rng.uniform(-50.0, 50.0, size=3)
            pts_q = pts @ q_rot.T + q_tra
            est = epnp(pix, pts_q, vga)
            expect_rot = pose.rotation @ q_rot.T
            expect_tra = pose.translation - expect_rot @ q_tra
            assert rotation_angle_between(est.rotation, expect_rot) < 1e-6
            assert np.linalg.norm(est.translation - expect_tra) < 1e-3

    def test_output_is_valid_pose(self, vga):
        rng = np.random.default_rng(23)
        for _ in range(50):
            pose, pts = sample_scene(rng, 8)
            pix = project(vga, pose.transform(pts))
            est = epnp(pix, pts, vga)
            assert est.is_valid()

    def test_too_few_points(self, vga):
        with pytest.raises(TooFewCorrespondencesError):
            epnp(np.zeros((3, 2)), np.zeros((3, 3)), vga)

    def test_collinear_raises(self, vga):
        pts = np.column_stack([np.linspace(0, 100, 6), np.zeros(6), np.zeros(6)])
        pix = np.column_stack([np.linspace(100, 400, 6), np.linspace(50, 300, 6)])
        with pytest.raises(DegenerateConfigurationError):
            epnp(pix, pts, vga)


class TestRefineLM:

    def test_ground_truth_is_fixed_point(self, vga):
        rng = np.random.default_rng(29)
        pose, pts = sample_scene(rng, 12)
        pix = project(vga, pose.transform(pts))
        out = refine_lm(pose, pix, pts, vga)
        assert np.linalg.norm(out.rotation - pose.rotation) < 1e-9
        assert np.linalg.norm(out.translation - pose.translation) < 1e-9

    def test_never_increases_objective(self, vga):
        rng = np.random.default_rng(37)
        for _ in range(100):
            pose, pts = sample_scene(rng, 10)
            pix = project(vga, pose.transform(pts)) + rng.normal(0, 2.0, size=(10, 2))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            start = Pose(rotation_about_axis(axis, np.deg2rad(10.0)) @ pose.rotation,
                         pose.translation + rng.normal(0, 30.0, size=3))
            res0 = reprojection_residuals(start, vga, pix, pts)
            if not np.all(np.isfinite(res0)):
                continue
            out = refine_lm(start, pix, pts, vga)
            res1 = reprojection_residuals(out, vga, pix, pts)
            assert res1 @ res1 <= res0 @ res0

    def test_monte_carlo_noise_improvement(self, vga):
        # 2 degree rotation offset, half-pixel noise
        rng = np.random.default_rng(41)
        improved = 0
        total = 0
        while total < 1000:
            pose, pts = sample_scene(rng, 15)
            pix = project(vga, pose.transform(pts)) + rng.normal(0, 0.5, size=(15, 2))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            start = Pose(rotation_about_axis(axis, np.deg2rad(2.0)) @ pose.rotation,
                         pose.translation)
            res0 = reprojection_residuals(start, vga, pix, pts)
            if not np.all(np.isfinite(res0)):
                continue
            out = refine_lm(start, pix, pts, vga)
            res1 = reprojection_residuals(out, vga, pix, pts)
            total += 1
            if res1 @ res1 < res0 @ res0:
                improved += 1
        assert improved >= 990

    def test_jacobian_matches_finite_differences(self, vga):
        from fragpose.geometry import axis_angle_to_matrix

        rng = np.random.default_rng(43)
        for _ in range(30):
            pose, pts = sample_scene(rng, 8)
            pix = project(vga, pose.transform(pts)) + rng.normal(0, 2.0, size=(8, 2))
            jac = reprojection_jacobian(pose, vga, pts)
            eps = 1e-5
            fd = np.zeros_like(jac)
            for k in range(6):
                delta = np.zeros(6)
                delta[k] = eps
                plus = Pose(axis_angle_to_matrix(delta[:3]) @ pose.rotation,
                            pose.translation + delta[3:])
                minus = Pose(axis_angle_to_matrix(-delta[:3]) @ pose.rotation,
                             pose.translation - delta[3:])
                fd[:, k] = (reprojection_residuals(plus, vga, pix, pts)
                            - reprojection_residuals(minus, vga, pix, pts)) / (2 * eps)
            rel = np.abs(jac - fd) / np.maximum(1.0, np.abs(fd))
            assert rel.max() < 1e-5

    def test_result_satisfies_pose_invariants(self, vga):
        rng = np.random.default_rng(47)
        for _ in range(50):
            pose, pts = sample_scene(rng, 10)
            pix = project(vga, pose.transform(pts)) + rng.normal(0, 1.0, size=(10, 2))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            start = Pose(rotation_about_axis(axis, np.deg2rad(5.0)) @ pose.rotation,
                         pose.translation)
            out = refine_lm(start, pix, pts, vga)
            assert rotation_is_valid(out.rotation)

    def test_too_few_correspondences(self, vga):
        with pytest.raises(TooFewCorrespondencesError):
            refine_lm(Pose.identity(), np.zeros((2, 2)), np.zeros((2, 3)), vga)


class TestDegeneracyCheck:

    def test_area_threshold_boundary(self):
        pts = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])
        # right triangle with legs a, b has area a*b/2
        pix_small = np.array([[0.0, 0.0], [18.0, 0.0], [0.0, 11.0]])  # area 99
        pix_large = np.array([[0.0, 0.0], [202.0, 0.0], [0.0, 1.0]])  # area 101
        assert not degeneracy_check(pix_small, pts, tau_t=100.0)
        assert degeneracy_check(pix_large, pts, tau_t=100.0)

    def test_identical_3d_points_rejected(self):
        # single-fragment mode makes every sample hit one 3D location
        pix = np.array([[10.0, 10.0], [300.0, 20.0], [150.0, 400.0]])
        pts = np.tile(np.array([5.0, 5.0, 5.0]), (3, 1))
        assert not degeneracy_check(pix, pts)

    def test_collinear_3d_rejected_despite_spread_pixels(self):
        pix = np.array([[10.0, 10.0], [300.0, 20.0], [150.0, 400.0]])
        pts = np.array([[0.0, 0.0, 0.0], [50.0, 50.0, 50.0], [100.0, 100.0, 100.0]])
        assert not degeneracy_check(pix, pts)

    def test_near_collinear_tolerance(self):
        pix = np.array([[0.0, 0.0], [200.0, 0.0], [0.0, 200.0]])
        base = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [200.0, 0.0, 0.0]])
        off = base.copy()
        off[1, 1] = 1e-1  # second extent well above threshold
        assert degeneracy_check(pix, off)
        off[1, 1] = 1e-6  # ratio far below 1e-6 of the spread
        assert not degeneracy_check(pix, off)

    def test_matches_rule_by_rule_oracle(self):
        def oracle(pix, pts, tau_t=100.0, tol=1e-6):
            d1 = pix[1] - pix[0]
            d2 = pix[2] - pix[0]
            area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
            if area < tau_t:
                return False
            s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
            if s[0] <= 0 or s[1] / s[0] < tol:
                return False
            return True

        rng = np.random.default_rng(53)
        agree = 0
        for _ in range(500):
            pix = rng.uniform(0, 640, size=(3, 2))
            pts = rng.uniform(-100, 100, size=(3, 3))
            if rng.uniform() < 0.3:
                # force collinear some of the time
                pts[2] = pts[0] + 2.0 * (pts[1] - pts[0])
            assert degeneracy_check(pix, pts) == oracle(pix, pts)
            agree += 1
        assert agree == 500


class TestPoseSanity:

    def test_behind_camera_rejected(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, -500.0]))
        pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
        assert not pose_sanity(pose, pts)

    def test_reflection_rejected(self):
        reflection = np.diag([1.0, 1.0, -1.0])
        pose = Pose(reflection, np.array([0.0, 0.0, 1000.0]))
        pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
        assert not pose_sanity(pose, pts)

    def test_points_in_front_accepted(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 800.0]))
        pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
        assert pose_sanity(pose, pts)

    def test_p3p_output_audit(self, vga):
        rng = np.random.default_rng(59)
        audited = 0
        while audited < 100:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            pose = Pose(rotation_about_axis(axis, rng.uniform(0, np.pi)),
                        np.array([rng.uniform(-100, 100), rng.uniform(-100, 100),
                                  rng.uniform(600, 1500)]))
            pts = rng.uniform(-150, 150, size=(3, 3))
            if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) < 1e3:
                continue
            cam_pts = pose.transform(pts)
            if np.any(cam_pts[:, 2] <= 100):
                continue
            pix = project(vga, cam_pts)
            for sol in p3p(pix, pts, vga):
                assert pose_sanity(sol, pts)
            audited += 1
