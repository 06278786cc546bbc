"""Two-view bootstrap: essential estimation, decomposition, triangulation."""

import numpy as np
import pytest

from deftrack.config import InitConfig
from deftrack.geometry import Pose, so3_exp
from deftrack.initializer import (
    InitializationError,
    RayCorrespondences,
    decompose_essential,
    eight_point_essential,
    epipolar_residuals,
    essential_from_pose,
    initialize_map,
    ransac_essential,
    rays_from_pixels,
    refine_relative_pose,
    triangulate_idwm,
)


def make_two_view(rng, n=100, angle=None, noise_rad=0.0, depth=(4.0, 10.0)):
    """Random relative geometry with unit-norm ray correspondences."""
    if angle is None:
        angle = rng.uniform(0.05, 0.4)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * angle)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    pts = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n),
                           rng.uniform(*depth, n)])
    r0 = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    pc = pts @ R.T + t
    r1 = pc / np.linalg.norm(pc, axis=1, keepdims=True)
    if noise_rad > 0:
        for r in (r0, r1):
            e = rng.normal(0.0, noise_rad, (n, 2))
            b1 = np.cross(r, [0.0, 0.0, 1.0])
            b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
            b2 = np.cross(r, b1)
            r += e[:, :1] * b1 + e[:, 1:] * b2
            r /= np.linalg.norm(r, axis=1, keepdims=True)
    return Pose(R, t), pts, r0, r1


def essential_distance(E1, E2):
    """Frobenius distance between normalized matrices, sign-agnostic."""
    a = E1 / np.linalg.norm(E1)
    b = E2 / np.linalg.norm(E2)
    return min(np.linalg.norm(a - b), np.linalg.norm(a + b))


def rot_err_deg(Ra, Rb):
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def tdir_err_deg(ta, tb):
    c = abs(np.dot(ta, tb) / (np.linalg.norm(ta) * np.linalg.norm(tb)))
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


class TestEightPoint:
    def test_recovers_true_essential(self, rng):
        pose, _, r0, r1 = make_two_view(rng)
        E = eight_point_essential(r0, r1)
        E_true = essential_from_pose(pose)
        assert essential_distance(E, E_true) < 1e-9

    def test_epipolar_constraint_satisfied(self, rng):
        pose, _, r0, r1 = make_two_view(rng)
        E = eight_point_essential(r0, r1)
        np.testing.assert_allclose(np.einsum("ij,jk,ik->i", r1, E, r0), 0.0,
                                   atol=1e-12)

    def test_manifold_structure(self, rng):
        _, _, r0, r1 = make_two_view(rng, noise_rad=1e-3)
        E = eight_point_essential(r0, r1)
        s = np.linalg.svd(E, compute_uv=False)
        assert s[0] == pytest.approx(s[1], rel=1e-12)
        assert s[2] == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(E) == pytest.approx(1.0, rel=1e-12)

    def test_too_few_pairs_rejected(self, rng):
        _, _, r0, r1 = make_two_view(rng, n=7)
        with pytest.raises(ValueError):
            eight_point_essential(r0, r1)


class TestEpipolarResiduals:
    def test_zero_on_exact_geometry(self, rng):
        pose, _, r0, r1 = make_two_view(rng)
        res = epipolar_residuals(essential_from_pose(pose), r0, r1)
        assert res.max() < 1e-12

    def test_grows_with_perturbation(self, rng):
        pose, _, r0, r1 = make_two_view(rng, noise_rad=2e-3)
        res = epipolar_residuals(essential_from_pose(pose), r0, r1)
        assert res.max() > 1e-4
        assert np.median(res) < 2e-2


class TestRansac:
    def test_rejects_planted_outliers(self, rng):
        pose, _, r0, r1 = make_two_view(rng, n=120, noise_rad=2e-4)
        bad = rng.choice(120, size=36, replace=False)
        r1 = r1.copy()
        r1[bad] = rng.normal(size=(36, 3))
        r1[bad] /= np.linalg.norm(r1[bad], axis=1, keepdims=True)
        r1[bad, 2] = np.abs(r1[bad, 2])
        E, mask = ransac_essential(r0, r1, np.arctan(2.0 / 500.0), 300, 0.95, rng)
        good = np.setdiff1d(np.arange(120), bad)
        assert mask[good].mean() > 0.9
        assert mask[bad].mean() < 0.15
        assert essential_distance(E, essential_from_pose(pose)) < 5e-2

    def test_too_few_correspondences(self, rng):
        _, _, r0, r1 = make_two_view(rng, n=6)
        with pytest.raises(InitializationError):
            ransac_essential(r0, r1, 1e-3, 50, 0.9, rng)

    def test_deterministic_given_rng_seed(self, rng):
        _, _, r0, r1 = make_two_view(rng, n=80, noise_rad=3e-4)
        E1, m1 = ransac_essential(r0, r1, 1e-3, 100, 0.99,
                                  np.random.default_rng(5))
        E2, m2 = ransac_essential(r0, r1, 1e-3, 100, 0.99,
                                  np.random.default_rng(5))
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(E1, E2)


class TestDecompose:
    def test_recovers_pose_up_to_scale(self, rng):
        for _ in range(10):
            pose, _, r0, r1 = make_two_view(rng)
            est = decompose_essential(essential_from_pose(pose), r0, r1)
            assert rot_err_deg(est.R, pose.R) < 5e-6
            assert tdir_err_deg(est.t, pose.t) < 5e-6
            assert np.linalg.norm(est.t) == pytest.approx(1.0, abs=1e-12)
            assert np.dot(est.t, pose.t) > 0.0  # cheirality fixes the sign

    def test_essential_from_pose_round_trip(self, rng):
        pose, _, r0, r1 = make_two_view(rng)
        E = essential_from_pose(pose)
        est = decompose_essential(E, r0, r1)
        assert essential_distance(E, essential_from_pose(est)) < 1e-12


class TestRefine:
    def test_pulls_perturbed_pose_back(self, rng):
        pose, _, r0, r1 = make_two_view(rng, n=150)
        nudge_R = so3_exp(np.array([0.01, -0.015, 0.008]))
        nudge_t = pose.t + np.array([0.02, -0.01, 0.015])
        start = Pose(nudge_R @ pose.R, nudge_t / np.linalg.norm(nudge_t))
        refined = refine_relative_pose(start, r0, r1)
        assert rot_err_deg(refined.R, pose.R) < 1e-3
        assert tdir_err_deg(refined.t, pose.t) < 1e-3
        assert rot_err_deg(refined.R, pose.R) < rot_err_deg(start.R, pose.R)
        assert np.linalg.norm(refined.t) == pytest.approx(1.0, abs=1e-12)

    def test_huber_radius_tolerates_contamination(self, rng):
        pose, _, r0, r1 = make_two_view(rng, n=200, noise_rad=2e-4)
        # coherent contamination: drag a block of second-view rays
        r1 = r1.copy()
        drag = so3_exp(np.array([0.0, 0.004, 0.0]))
        r1[:40] = r1[:40] @ drag.T
        plain = refine_relative_pose(pose, r0, r1)
        clipped = refine_relative_pose(pose, r0, r1, huber_rad=1e-4)
        assert tdir_err_deg(clipped.t, pose.t) <= tdir_err_deg(plain.t, pose.t)
        assert rot_err_deg(clipped.R, pose.R) < 0.2


class TestTriangulateIdwm:
    def test_noise_free_exact(self, rng):
        pose, pts, r0, r1 = make_two_view(rng)
        est, parallax, in_front = triangulate_idwm(pose, r0, r1)
        assert in_front.all()
        assert parallax.min() > 0.0
        rel = np.linalg.norm(est - pts, axis=1) / np.linalg.norm(pts, axis=1)
        assert rel.max() < 1e-9

    def test_beats_midpoint_reprojection_at_low_parallax(self, rng):
        """Angular reprojection of IDWM vs the classical midpoint."""
        def midpoint(pose, r0, r1):
            # closest-point midpoint between the two viewing rays
            out = np.zeros((len(r0), 3))
            C1 = -pose.R.T @ pose.t
            for k in range(len(r0)):
                a = r0[k]
                b = pose.R.T @ r1[k]
                ab = np.dot(a, b)
                A = np.array([[1.0, -ab], [ab, -np.dot(b, b)]])
                rhs = np.array([np.dot(a, C1), np.dot(b, C1)])
                s, u = np.linalg.solve(A, rhs)
                out[k] = 0.5 * (s * a + (C1 + u * b))
            return out

        def mean_reproj(pose, pts3d, r0, r1):
            errs = []
            for rays, transform in ((r0, None), (r1, pose)):
                p = pts3d if transform is None else transform.apply(pts3d)
                p = p / np.linalg.norm(p, axis=1, keepdims=True)
                dot = np.clip(np.einsum("ij,ij->i", p, rays), -1.0, 1.0)
                errs.append(np.degrees(np.arccos(dot)))
            return float(np.mean(errs))

        wins = 0
        trials = 60
        for i in range(trials):
            local = np.random.default_rng(400 + i)
            # shallow geometry: ~2 degrees of parallax
            pose, pts, r0, r1 = make_two_view(local, n=40, angle=0.05,
                                              depth=(25.0, 35.0))
            for r in (r0, r1):
                e = local.normal(0.0, 1.0 / 500.0, (len(r), 2))
                b1 = np.cross(r, [0.0, 0.0, 1.0])
                b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
                b2 = np.cross(r, b1)
                r += e[:, :1] * b1 + e[:, 1:] * b2
                r /= np.linalg.norm(r, axis=1, keepdims=True)
            ours, _, _ = triangulate_idwm(pose, r0, r1)
            classic = midpoint(pose, r0, r1)
            if mean_reproj(pose, ours, r0, r1) <= mean_reproj(pose, classic, r0, r1):
                wins += 1
        assert wins / trials > 0.9

    def test_flags_points_behind_camera(self, rng):
        pose, pts, r0, r1 = make_two_view(rng, n=20)
        flipped = r0.copy()
        flipped[0] = -flipped[0]  # ray pointing away: negative depth solution
        _, _, in_front = triangulate_idwm(pose, flipped, r1)
        assert not in_front[0]
        assert in_front[1:].all()


class TestInitializeMap:
    class FakeCam:
        fx = 500.0

    def test_full_bootstrap_recovers_geometry(self, rng):
        pose, pts, r0, r1 = make_two_view(rng, n=120)
        corr = RayCorrespondences(np.arange(120), r0, r1)
        res = initialize_map(self.FakeCam, corr, InitConfig(),
                             np.random.default_rng(8))
        assert rot_err_deg(res.pose.R, pose.R) < 1e-4
        assert tdir_err_deg(res.pose.t, pose.t) < 1e-4
        assert res.n_input == 120
        assert res.n_inliers >= 110
        assert len(res.ids) == len(res.points)
        assert np.isin(res.ids, corr.ids).all()
        sel = np.searchsorted(corr.ids, res.ids)
        rel = (np.linalg.norm(res.points - pts[sel], axis=1)
               / np.linalg.norm(pts[sel], axis=1))
        assert np.median(rel) < 1e-6

    def test_pure_rotation_raises(self, rng):
        # no baseline: triangulation has no parallax to work with
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = so3_exp(axis * 0.2)
        pts = np.column_stack([rng.uniform(-2, 2, 60), rng.uniform(-1.5, 1.5, 60),
                               rng.uniform(4, 10, 60)])
        r0 = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        r1 = r0 @ R.T
        corr = RayCorrespondences(np.arange(60), r0, r1)
        with pytest.raises(InitializationError):
            initialize_map(self.FakeCam, corr, InitConfig(),
                           np.random.default_rng(1))

    def test_too_few_points_raises(self, rng):
        _, _, r0, r1 = make_two_view(rng, n=5)
        corr = RayCorrespondences(np.arange(5), r0, r1)
        with pytest.raises(InitializationError):
            initialize_map(self.FakeCam, corr, InitConfig(),
                           np.random.default_rng(1))

    def test_rays_from_pixels_matches_unproject(self, pinhole, rng):
        pts = np.column_stack([rng.uniform(-2, 2, 30), rng.uniform(-1.5, 1.5, 30),
                               rng.uniform(6, 12, 30)])
        pix, ok = pinhole.project(pts)
        assert ok.all()
        corr = rays_from_pixels(pinhole, np.arange(30), pix, pix)
        dirs = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        np.testing.assert_allclose(corr.rays0, dirs, atol=1e-6)
        assert len(corr) == 30
