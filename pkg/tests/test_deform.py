"""Joint camera-pose and per-point deformation estimation."""

import numpy as np
import pytest

from deftrack.config import DeformConfig, SolverConfig
from deftrack.deform import (
    PointMap,
    SequenceTracker,
    TrackingError,
    build_graph,
    build_tracking_problem,
    predict_pose,
    refine_pose_rigid,
    track_frame,
)
from deftrack.geometry import Pose, se3_exp, so3_exp
from deftrack.nlls import check_jacobians


def sample_cloud(rng, n=80, depth=(30.0, 60.0)):
    return np.column_stack([rng.uniform(-15, 15, n), rng.uniform(-12, 12, n),
                            rng.uniform(*depth, n)])


def observe(camera, pose, pts, rng=None, noise=0.0):
    pix, ok = camera.project(pose.apply(pts))
    assert ok.all()
    if noise > 0 and rng is not None:
        pix = pix + rng.normal(0.0, noise, pix.shape)
    return pix


class TestPointMap:
    def test_from_init_sorts_by_id(self, rng):
        ids = np.array([7, 2, 9, 4])
        pts = rng.normal(size=(4, 3))
        pmap = PointMap.from_init(ids, pts)
        np.testing.assert_array_equal(pmap.ids, [2, 4, 7, 9])
        np.testing.assert_allclose(pmap.anchors[0], pts[1], atol=0.0)
        np.testing.assert_allclose(pmap.anchors[2], pts[0], atol=0.0)
        assert pmap.active.all()
        np.testing.assert_array_equal(pmap.disp, 0.0)

    def test_positions_are_anchor_plus_disp(self, rng):
        pmap = PointMap.from_init(np.arange(5), rng.normal(size=(5, 3)))
        pmap.disp[:] = rng.normal(size=(5, 3))
        np.testing.assert_allclose(pmap.positions(),
                                   pmap.anchors + pmap.disp, atol=0.0)

    def test_scale(self, rng):
        pmap = PointMap.from_init(np.arange(5), rng.normal(size=(5, 3)))
        pmap.disp[:] = 0.5
        before = pmap.positions().copy()
        pmap.scale(3.0)
        np.testing.assert_allclose(pmap.positions(), 3.0 * before, atol=1e-12)


class TestBuildGraph:
    def test_knn_edges_and_weights(self, rng):
        pts = sample_cloud(rng, n=30)
        k, sigma = 5, 12.0
        graph = build_graph(pts, k, sigma)
        assert graph.n_edges == 30 * k
        # verify against a brute-force neighbor oracle
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        for i in range(30):
            mine = np.sort(graph.edges_j[graph.edges_i == i])
            oracle = np.sort(np.argsort(d[i], kind="stable")[:k])
            np.testing.assert_array_equal(mine, oracle)
        expect_w = np.exp(-d[graph.edges_i, graph.edges_j] ** 2
                          / (2.0 * sigma * sigma))
        np.testing.assert_allclose(graph.weights, expect_w, atol=1e-12)

    def test_small_cloud_truncates_k(self, rng):
        pts = sample_cloud(rng, n=4)
        graph = build_graph(pts, 20, 10.0)
        assert graph.n_edges == 4 * 3

    def test_weights_decay_with_distance(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        graph = build_graph(pts, 2, 5.0)
        w = {(i, j): w for i, j, w in
             zip(graph.edges_i, graph.edges_j, graph.weights)}
        assert w[(0, 1)] > w[(0, 2)]


def test_predict_pose_constant_velocity():
    step = se3_exp(np.array([0.3, -0.1, 0.2, 0.02, 0.05, -0.03]))
    t1 = se3_exp(np.array([0.1, 0.2, -0.3, 0.01, -0.02, 0.03]))
    t2 = step.compose(t1)
    pred = predict_pose(t2, t1)
    expect = step.compose(t2)
    np.testing.assert_allclose(pred.R, expect.R, atol=1e-12)
    np.testing.assert_allclose(pred.t, expect.t, atol=1e-12)


class TestTrackingProblem:
    def test_jacobians_match_finite_differences(self, pinhole, rng):
        pts = sample_cloud(rng, n=12)
        pose = Pose(so3_exp(np.array([0.01, -0.02, 0.015])),
                    np.array([0.1, -0.05, 0.2]))
        obs = observe(pinhole, pose, pts, rng, noise=0.5)
        graph = build_graph(pts, 4, 15.0)
        problem, _, delta_block = build_tracking_problem(
            pinhole, pose, pts, obs, graph, DeformConfig())
        delta_block.values = rng.normal(0.0, 0.05, size=(12, 3))
        worst = check_jacobians(problem)
        for name, err in worst.items():
            assert err < 1e-4, name

    def test_regularizers_zero_at_zero_delta(self, pinhole, rng):
        pts = sample_cloud(rng, n=15)
        pose = Pose(np.eye(3), np.zeros(3))
        obs = observe(pinhole, pose, pts, rng, noise=1.0)
        graph = build_graph(pts, 5, 15.0)
        problem, _, _ = build_tracking_problem(
            pinhole, pose, pts, obs, graph, DeformConfig())
        _, details = problem.evaluate()
        by_name = {d["group"].name: d["cost"] for d in details}
        assert by_name["spatial"] == 0.0
        assert by_name["temporal"] == 0.0
        assert by_name["reprojection"] > 0.0

    def test_spatial_term_invariant_to_common_shift(self, pinhole, rng):
        """Equal deltas mean zero spatial cost: only the temporal term
        resists a map-wide translation."""
        pts = sample_cloud(rng, n=15)
        pose = Pose(np.eye(3), np.zeros(3))
        obs = observe(pinhole, pose, pts)
        graph = build_graph(pts, 5, 15.0)
        problem, _, delta_block = build_tracking_problem(
            pinhole, pose, pts, obs, graph, DeformConfig())
        delta_block.values = np.tile([0.5, -0.3, 0.8], (15, 1))
        _, details = problem.evaluate()
        by_name = {d["group"].name: d["cost"] for d in details}
        assert by_name["spatial"] == pytest.approx(0.0, abs=1e-20)
        assert by_name["temporal"] > 0.0


class TestRigidRefine:
    def test_recovers_small_motion(self, pinhole, rng):
        pts = sample_cloud(rng)
        true = Pose(so3_exp(np.array([0.01, 0.02, -0.01])),
                    np.array([0.3, -0.2, 0.5]))
        obs = observe(pinhole, true, pts)
        seed = Pose(np.eye(3), np.zeros(3))
        pose, report = refine_pose_rigid(pinhole, seed, pts, obs,
                                         DeformConfig(), SolverConfig())
        assert report is not None
        np.testing.assert_allclose(pose.R, true.R, atol=1e-6)
        np.testing.assert_allclose(pose.t, true.t, atol=1e-4)

    def test_too_few_obs_returns_seed(self, pinhole, rng):
        pts = sample_cloud(rng, n=3)
        seed = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        pose, report = refine_pose_rigid(pinhole, seed, pts,
                                         observe(pinhole, seed, pts),
                                         DeformConfig(), SolverConfig())
        assert report is None
        np.testing.assert_array_equal(pose.t, seed.t)


class TestTrackFrame:
    def make_map(self, rng, n=60):
        pts = sample_cloud(rng, n=n)
        return PointMap.from_init(np.arange(n), pts), pts

    def test_rigid_motion_attributed_to_camera(self, pinhole, rng):
        """Floating-map ambiguity: observations consistent with either a
        camera step or a rigid map shift must resolve to camera motion."""
        pmap, pts = self.make_map(rng)
        true = Pose(so3_exp(np.array([0.005, -0.01, 0.002])),
                    np.array([0.4, 0.1, -0.3]))
        obs = observe(pinhole, true, pts)
        res = track_frame(pinhole, pmap, 1, pmap.ids, obs,
                          Pose(np.eye(3), np.zeros(3)),
                          DeformConfig(), SolverConfig())
        np.testing.assert_allclose(res.pose.R, true.R, atol=1e-5)
        np.testing.assert_allclose(res.pose.t, true.t, atol=5e-3)
        cam_step = np.linalg.norm(true.t)
        med_delta = np.median(np.linalg.norm(res.deltas, axis=1))
        assert med_delta < 0.05 * cam_step
        assert len(res.lost_ids) == 0
        assert res.mean_reproj_px < 0.1

    def test_smooth_deformation_recovered(self, pinhole, rng):
        pmap, pts = self.make_map(rng, n=80)
        # smooth displacement field, camera static; the field oscillates
        # over the cloud so no rigid pose can soak it up
        true_delta = np.zeros((80, 3))
        true_delta[:, 1] = 0.8 * np.sin(0.25 * pts[:, 2] + 0.15 * pts[:, 0])
        moved = pts + true_delta
        pose = Pose(np.eye(3), np.zeros(3))
        obs = observe(pinhole, pose, moved)
        res = track_frame(pinhole, pmap, 1, pmap.ids, obs, pose,
                          DeformConfig(), SolverConfig())
        got = res.deltas[:, 1]
        corr = np.corrcoef(got, true_delta[:, 1])[0, 1]
        assert corr > 0.9
        # commit happened: map positions moved toward the deformed truth
        live = pmap.active
        before = np.linalg.norm(pts[live] - moved[live], axis=1)
        after = np.linalg.norm(pmap.positions()[live] - moved[live], axis=1)
        assert np.median(after) < np.median(before)

    def test_unobserved_points_dropped(self, pinhole, rng):
        pmap, pts = self.make_map(rng)
        keep = np.arange(40)
        pose = Pose(np.eye(3), np.zeros(3))
        res = track_frame(pinhole, pmap, 1, pmap.ids[keep],
                          observe(pinhole, pose, pts[keep]), pose,
                          DeformConfig(), SolverConfig())
        assert not pmap.active[40:].any()
        assert np.isin(pmap.ids[40:], res.lost_ids).all()

    def test_committed_points_satisfy_gate(self, pinhole, rng):
        """Whatever the solve does, surviving points reproject within the
        gate radius; an outlier is either absorbed or deactivated."""
        pmap, pts = self.make_map(rng)
        pose = Pose(np.eye(3), np.zeros(3))
        obs = observe(pinhole, pose, pts, rng, noise=0.3)
        obs[7] += np.array([40.0, -25.0])  # gross mistrack
        cfg = DeformConfig()
        res = track_frame(pinhole, pmap, 1, pmap.ids, obs, pose,
                          cfg, SolverConfig())
        live = pmap.active
        pix, ok = pinhole.project(res.pose.apply(pmap.positions()[live]))
        assert ok.all()
        idx = np.searchsorted(pmap.ids, pmap.ids[live])
        err = np.linalg.norm(pix - obs[idx], axis=1)
        assert err.max() <= cfg.lost_gate_px + 1e-9

    def test_gate_drops_unexplained_observation(self, pinhole, rng):
        """With the solve frozen, an inconsistent observation cannot be
        absorbed and must fall to the post-fit gate."""
        pmap, pts = self.make_map(rng)
        pose = Pose(np.eye(3), np.zeros(3))
        obs = observe(pinhole, pose, pts)
        obs[7] += np.array([40.0, -25.0])
        res = track_frame(pinhole, pmap, 1, pmap.ids, obs, pose,
                          DeformConfig(), SolverConfig(max_iterations=0))
        assert 7 in res.lost_ids
        assert not pmap.active[7]
        assert pmap.active.sum() == 59

    def test_too_few_observations_raise(self, pinhole, rng):
        pmap, pts = self.make_map(rng)
        pose = Pose(np.eye(3), np.zeros(3))
        with pytest.raises(TrackingError):
            track_frame(pinhole, pmap, 1, pmap.ids[:3],
                        observe(pinhole, pose, pts[:3]), pose,
                        DeformConfig(), SolverConfig())

    def test_unknown_ids_ignored(self, pinhole, rng):
        pmap, pts = self.make_map(rng)
        pose = Pose(np.eye(3), np.zeros(3))
        ids = np.concatenate([pmap.ids, [5000, 6000]])
        px = np.vstack([observe(pinhole, pose, pts),
                        [[10.0, 10.0], [20.0, 20.0]]])
        res = track_frame(pinhole, pmap, 1, ids, px, pose,
                          DeformConfig(), SolverConfig())
        assert 5000 not in res.obs_ids
        assert len(res.obs_ids) == 60


class TestSequenceTracker:
    def test_bootstrap_and_steps(self, pinhole, rng):
        pts = sample_cloud(rng, n=70)
        ids = np.arange(70)
        step = Pose(so3_exp(np.array([0.002, -0.004, 0.001])),
                    np.array([0.2, 0.05, -0.15]))
        tracker = SequenceTracker(pinhole, DeformConfig(), SolverConfig())
        tracker.bootstrap(0, 1, ids, pts, step)
        assert 0 in tracker.poses and 1 in tracker.poses
        np.testing.assert_allclose(tracker.poses[0].R, np.eye(3), atol=0.0)

        pose_f = step
        for f in (2, 3, 4):
            pose_f = step.compose(pose_f)
            res = tracker.step(f, ids, observe(pinhole, pose_f, pts))
            assert res.solver_status in ("converged_cost", "converged_grad",
                                         "max_iterations", "stalled")
        np.testing.assert_allclose(tracker.poses[4].t, pose_f.t, atol=0.02)
        rows = tracker.estimate_rows(4)
        assert len(rows) == tracker.pmap.n_active()
        frame, pid, x, y, z = rows[0]
        assert frame == 4

    def test_bootstrap_scale(self, pinhole, rng):
        pts = sample_cloud(rng, n=40)
        ids = np.arange(40)
        step = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        a = SequenceTracker(pinhole, DeformConfig(), SolverConfig())
        a.bootstrap(0, 1, ids, pts, step, map_scale=1.0)
        b = SequenceTracker(pinhole, DeformConfig(), SolverConfig())
        b.bootstrap(0, 1, ids, pts, step, map_scale=2.5)
        np.testing.assert_allclose(b.pmap.positions(),
                                   2.5 * a.pmap.positions(), atol=1e-12)
        np.testing.assert_allclose(b.poses[1].t, 2.5 * a.poses[1].t,
                                   atol=1e-12)

    def test_predicted_constant_velocity(self, pinhole, rng):
        pts = sample_cloud(rng, n=40)
        ids = np.arange(40)
        step = Pose(np.eye(3), np.array([0.1, 0.0, 0.05]))
        tracker = SequenceTracker(pinhole, DeformConfig(), SolverConfig())
        tracker.bootstrap(0, 1, ids, pts, step)
        pose2 = step.compose(step)
        tracker.step(2, ids, observe(pinhole, pose2, pts))
        pred = tracker.predicted()
        expect = tracker.poses[2].t + (tracker.poses[2].t - tracker.poses[1].t)
        np.testing.assert_allclose(pred.t, expect, atol=0.05)
