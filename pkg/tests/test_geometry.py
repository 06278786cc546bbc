"""Camera models, pose algebra, and Lie-group helpers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deftrack.geometry import (
    CameraModel,
    Pose,
    load_calibration,
    save_calibration,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)


def sample_front_points(rng, n, depth=(2.0, 20.0), spread=0.6):
    """Camera-frame points inside a forward cone."""
    z = rng.uniform(*depth, size=n)
    x = rng.uniform(-spread, spread, size=n) * z
    y = rng.uniform(-spread, spread, size=n) * z
    return np.column_stack([x, y, z])


class TestProjection:
    def test_pinhole_known_value(self, pinhole):
        pix, ok = pinhole.project(np.array([1.0, 2.0, 10.0]))
        assert ok
        # u = fx * x/z + cx, v = fy * y/z + cy
        np.testing.assert_allclose(pix, [361.5, 323.5], atol=1e-12)

    def test_fisheye_known_value(self):
        cam = CameraModel("fisheye", 640, 480, 300.0, 300.0, 319.5, 239.5,
                          dist=(0.0, 0.0, 0.0, 0.0))
        pix, ok = cam.project(np.array([1.0, 0.0, 1.0]))
        assert ok
        # equidistant: u = fx * theta + cx for a point in the x-z plane
        np.testing.assert_allclose(pix, [319.5 + 300.0 * np.pi / 4.0, 239.5],
                                   atol=1e-12)

    def test_behind_camera_invalid(self, pinhole):
        pix, ok = pinhole.project(np.array([0.0, 0.0, -1.0]))
        assert not ok
        np.testing.assert_array_equal(pix, [0.0, 0.0])

    def test_fisheye_sees_behind(self, fisheye):
        # a wide-angle lens maps points with z < 0 as long as they are off axis
        _, ok = fisheye.project(np.array([1.0, 0.0, -0.2]))
        assert ok
        _, ok_axis = fisheye.project(np.array([0.0, 0.0, -1.0]))
        assert not ok_axis

    @pytest.mark.parametrize("cam_fixture",
                             ["pinhole", "pinhole_distorted", "fisheye"])
    def test_unproject_round_trip(self, cam_fixture, rng, request):
        cam = request.getfixturevalue(cam_fixture)
        pts = sample_front_points(rng, 200, spread=0.4)
        pix, ok = cam.project(pts)
        assert ok.all()
        rays = cam.unproject(pix)
        np.testing.assert_allclose(np.linalg.norm(rays, axis=1), 1.0, atol=1e-12)
        dirs = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        np.testing.assert_allclose(rays, dirs, atol=1e-6)

    @pytest.mark.parametrize("cam_fixture",
                             ["pinhole", "pinhole_distorted", "fisheye"])
    def test_jacobian_matches_central_differences(self, cam_fixture, rng, request):
        cam = request.getfixturevalue(cam_fixture)
        pts = sample_front_points(rng, 50, spread=0.3)
        J, ok = cam.project_jacobian(pts)
        assert ok.all()
        h = 1e-6
        for axis in range(3):
            dp = np.zeros(3)
            dp[axis] = h
            hi, _ = cam.project(pts + dp)
            lo, _ = cam.project(pts - dp)
            num = (hi - lo) / (2.0 * h)
            np.testing.assert_allclose(J[:, :, axis], num, atol=1e-4)

    def test_contains_margin(self, pinhole):
        pix = np.array([[5.0, 5.0], [320.0, 240.0], [635.0, 475.0]])
        inside = pinhole.contains(pix, margin=8.0)
        np.testing.assert_array_equal(inside, [False, True, False])


class TestPose:
    def test_apply_matches_matrix(self, rng, make_pose):
        pose = make_pose()
        pts = rng.normal(size=(20, 3))
        hom = np.column_stack([pts, np.ones(len(pts))])
        expect = (pose.matrix() @ hom.T).T[:, :3]
        np.testing.assert_allclose(pose.apply(pts), expect, atol=1e-12)

    def test_compose_and_inverse(self, make_pose, rng):
        a, b = make_pose(), make_pose()
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose((a @ b).apply(pts), a.apply(b.apply(pts)),
                                   atol=1e-12)
        ident = a @ a.inverse()
        np.testing.assert_allclose(ident.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.t, 0.0, atol=1e-12)

    def test_quaternion_round_trip(self, make_pose):
        for _ in range(20):
            pose = make_pose(max_angle=3.0)
            q = pose.to_quaternion()
            assert q[3] >= 0.0
            back = Pose.from_quaternion(q, pose.t)
            np.testing.assert_allclose(back.R, pose.R, atol=1e-12)

    def test_orthonormalized_repairs_drift(self, make_pose, rng):
        pose = make_pose()
        dirty = Pose(pose.R + rng.normal(scale=1e-4, size=(3, 3)), pose.t)
        clean = dirty.orthonormalized()
        np.testing.assert_allclose(clean.R @ clean.R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(clean.R) > 0.0
        assert np.max(np.abs(clean.R - pose.R)) < 1e-3

    def test_rotation_angle(self):
        R = so3_exp(np.array([0.0, 0.3, 0.0]))
        assert Pose(R, np.zeros(3)).rotation_angle() == pytest.approx(0.3, abs=1e-12)


class TestLieGroups:
    def test_so3_round_trip_small_and_large(self):
        for angle in (1e-12, 1e-7, 0.5, 2.0, np.pi - 1e-6):
            w = np.array([1.0, -2.0, 0.5])
            w = w / np.linalg.norm(w) * angle
            np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-6)

    def test_so3_exp_identity(self):
        np.testing.assert_allclose(so3_exp(np.zeros(3)), np.eye(3), atol=0.0)

    @given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
           st.floats(1e-4, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_so3_log_inverts_exp(self, axis, angle):
        axis = np.asarray(axis)
        norm = np.linalg.norm(axis)
        if norm < 1e-3:
            return
        w = axis / norm * angle
        np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-8)

    def test_se3_round_trip(self, rng):
        for _ in range(20):
            xi = rng.normal(scale=0.8, size=6)
            pose = se3_exp(xi)
            np.testing.assert_allclose(se3_log(pose), xi, atol=1e-9)

    def test_se3_twist_order_translation_first(self):
        # a pure-translation twist moves the origin by exactly rho
        pose = se3_exp(np.array([0.1, -0.2, 0.3, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(pose.R, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(pose.t, [0.1, -0.2, 0.3], atol=1e-15)


class TestCalibrationIO:
    @pytest.mark.parametrize("cam_fixture",
                             ["pinhole", "pinhole_distorted", "fisheye"])
    def test_round_trip(self, cam_fixture, tmp_path, request):
        cam = request.getfixturevalue(cam_fixture)
        path = tmp_path / "calib.txt"
        save_calibration(str(path), cam)
        back = load_calibration(str(path))
        assert back.model == cam.model
        assert (back.width, back.height) == (cam.width, cam.height)
        np.testing.assert_allclose(
            [back.fx, back.fy, back.cx, back.cy],
            [cam.fx, cam.fy, cam.cx, cam.cy], atol=0.0)
        np.testing.assert_allclose(back.dist, cam.dist, atol=0.0)
