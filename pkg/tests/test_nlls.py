"""Robust sparse Levenberg-Marquardt machinery."""

import numpy as np
import pytest
from scipy import stats

from deftrack.config import SolverConfig
from deftrack.geometry import Pose, se3_exp
from deftrack.nlls import (
    CHI2_95_2DOF,
    CHI2_95_3DOF,
    EuclideanParams,
    PoseParams,
    Problem,
    ResidualGroup,
    check_jacobians,
    huber,
    solve,
)


class TestHuber:
    def test_quadratic_below_threshold(self):
        e = np.array([0.0, 0.5, 2.0])
        rho, w = huber(e, 2.0)
        np.testing.assert_allclose(rho, e, atol=0.0)
        np.testing.assert_allclose(w, 1.0, atol=0.0)

    def test_linear_above_threshold(self):
        # rho = 2 sqrt(d2 e) - d2 on squared inputs, weight sqrt(d2/e)
        e = np.array([8.0, 50.0])
        rho, w = huber(e, 2.0)
        np.testing.assert_allclose(rho, 2.0 * np.sqrt(2.0 * e) - 2.0, rtol=1e-15)
        np.testing.assert_allclose(w, np.sqrt(2.0 / e), rtol=1e-15)

    def test_continuous_at_boundary(self):
        lo, _ = huber(np.array([2.0 - 1e-12]), 2.0)
        hi, _ = huber(np.array([2.0 + 1e-12]), 2.0)
        assert abs(lo[0] - hi[0]) < 1e-9

    def test_weight_nonincreasing(self):
        e = np.linspace(0.01, 100.0, 300)
        _, w = huber(e, 5.0)
        assert np.all(np.diff(w) <= 1e-15)


def test_chi2_gates_match_scipy():
    assert CHI2_95_2DOF == pytest.approx(stats.chi2.ppf(0.95, 2), abs=5e-4)
    assert CHI2_95_3DOF == pytest.approx(stats.chi2.ppf(0.95, 3), abs=5e-4)


def linear_problem(A, b, x0, fixed=False, sigma=1.0):
    """Residual r = A x - b over a single Euclidean block."""
    problem = Problem()
    block = problem.add_block(EuclideanParams("x", x0.reshape(1, -1), fixed=fixed))

    def eval_fn(_):
        x = block.values[0]
        r = (A @ x - b).reshape(1, -1)
        return r, [A.reshape(1, *A.shape)]

    problem.add_group(ResidualGroup(
        name="lin", dim=len(b), params=[(block, None)], eval_fn=eval_fn,
        sigma=np.full(len(b), sigma)))
    return problem, block


class TestSolve:
    def test_linear_least_squares_exact(self, rng):
        A = rng.normal(size=(6, 3))
        x_true = rng.normal(size=3)
        b = A @ x_true
        problem, block = linear_problem(A, b, np.zeros(3))
        report = solve(problem, SolverConfig())
        assert report.status in ("converged_cost", "converged_grad")
        np.testing.assert_allclose(block.values[0], x_true, atol=1e-8)
        assert report.final_cost < 1e-12
        assert report.final_cost <= report.initial_cost

    def test_rosenbrock_valley(self):
        problem = Problem()
        block = problem.add_block(
            EuclideanParams("xy", np.array([[-1.2, 1.0]])))

        def eval_fn(_):
            x, y = block.values[0]
            r = np.array([[10.0 * (y - x * x), 1.0 - x]])
            J = np.array([[[-20.0 * x, 10.0], [-1.0, 0.0]]])
            return r, [J]

        problem.add_group(ResidualGroup(
            name="rosen", dim=2, params=[(block, None)], eval_fn=eval_fn,
            sigma=np.ones(2)))
        report = solve(problem, SolverConfig(max_iterations=200))
        np.testing.assert_allclose(block.values[0], [1.0, 1.0], atol=1e-6)
        assert report.final_cost < 1e-10

    def test_fixed_block_untouched(self, rng):
        A = rng.normal(size=(5, 3))
        x0 = rng.normal(size=3)
        problem, block = linear_problem(A, A @ x0 + 1.0, x0, fixed=True)
        before = block.values.copy()
        report = solve(problem, SolverConfig())
        np.testing.assert_array_equal(block.values, before)
        assert report.final_cost == pytest.approx(report.initial_cost)

    def test_robust_loss_bounds_outlier_influence(self, rng):
        """Fit a constant to contaminated samples, plain vs Huber."""
        data = np.concatenate([rng.normal(2.0, 0.1, 30), [500.0]])

        def fit(delta_sq):
            problem = Problem()
            block = problem.add_block(EuclideanParams("c", np.zeros((1, 1))))

            def eval_fn(_):
                r = (block.values[0, 0] - data).reshape(-1, 1)
                return r, [np.ones((len(data), 1, 1))]

            problem.add_group(ResidualGroup(
                name="fit", dim=1, params=[(block, np.zeros(len(data), dtype=int))],
                eval_fn=eval_fn, sigma=np.ones(1), delta_sq=delta_sq))
            solve(problem, SolverConfig(max_iterations=100))
            return block.values[0, 0]

        plain = fit(None)
        robust = fit(1.0)
        assert abs(plain - 2.0) > 5.0      # dragged by the outlier
        assert abs(robust - 2.0) < 0.2     # clipped

    def test_group_order_invariance(self, rng):
        A1 = rng.normal(size=(4, 2))
        A2 = rng.normal(size=(3, 2))
        x_true = rng.normal(size=2)
        b1, b2 = A1 @ x_true, A2 @ x_true

        def build(order):
            problem = Problem()
            block = problem.add_block(EuclideanParams("x", np.zeros((1, 2))))
            groups = []
            for name, A, b in (("g1", A1, b1), ("g2", A2, b2)):
                def eval_fn(_, A=A, b=b):
                    return ((A @ block.values[0] - b).reshape(1, -1),
                            [A.reshape(1, *A.shape)])
                groups.append(ResidualGroup(
                    name=name, dim=len(b), params=[(block, None)],
                    eval_fn=eval_fn, sigma=np.ones(len(b))))
            for g in (groups if order else groups[::-1]):
                problem.add_group(g)
            solve(problem, SolverConfig())
            return block.values[0].copy()

        np.testing.assert_allclose(build(True), build(False), atol=1e-10)

    def test_lambda_escalation_stalls_cleanly(self):
        """A group whose eval never improves must stall, not loop forever."""
        problem = Problem()
        block = problem.add_block(EuclideanParams("x", np.zeros((1, 1))))

        def eval_fn(_):
            # gradient points somewhere but every step is rejected because
            # the residual is constant in practice (jacobian lies)
            return np.array([[1.0]]), [np.array([[[1.0]]])]

        problem.add_group(ResidualGroup(
            name="liar", dim=1, params=[(block, None)], eval_fn=eval_fn,
            sigma=np.ones(1)))
        report = solve(problem, SolverConfig(max_iterations=50))
        assert report.status in ("stalled", "max_iterations")


class TestPoseParams:
    def test_retract_left_multiplies(self, make_pose):
        pose = make_pose()
        block = PoseParams("T", pose)
        xi = np.array([0.01, -0.02, 0.03, 0.004, -0.005, 0.006])
        block.retract(xi)
        expect = se3_exp(xi).compose(pose)
        np.testing.assert_allclose(block.pose.R, expect.R, atol=1e-12)
        np.testing.assert_allclose(block.pose.t, expect.t, atol=1e-12)

    def test_snapshot_restore(self, make_pose):
        block = PoseParams("T", make_pose())
        snap = block.snapshot()
        block.retract(np.full(6, 0.1))
        block.restore(snap)
        np.testing.assert_allclose(block.pose.R, snap.R, atol=0.0)
        np.testing.assert_allclose(block.pose.t, snap.t, atol=0.0)


class TestCheckJacobians:
    def test_accepts_correct_jacobian(self, rng):
        A = rng.normal(size=(5, 3))
        problem, _ = linear_problem(A, rng.normal(size=5), rng.normal(size=3))
        worst = check_jacobians(problem)
        assert worst["lin"] < 1e-7

    def test_flags_wrong_jacobian(self, rng):
        problem = Problem()
        block = problem.add_block(EuclideanParams("x", np.zeros((1, 2))))

        def eval_fn(_):
            x = block.values[0]
            r = np.array([[x[0] ** 2 + x[1], x[1]]])
            J = np.array([[[2.0 * x[0], 1.0], [1.0, 1.0]]])  # wrong corner
            return r, [J]

        problem.add_group(ResidualGroup(
            name="bad", dim=2, params=[(block, None)], eval_fn=eval_fn,
            sigma=np.ones(2)))
        block.values = np.array([[0.3, -0.2]])
        worst = check_jacobians(problem)
        assert worst["bad"] > 1e-2


def test_pose_in_problem_converges():
    """Point-cloud alignment: solve for the pose mapping cloud A to B."""
    rng = np.random.default_rng(77)
    pts = rng.normal(size=(40, 3)) * 2.0
    true = se3_exp(np.array([0.2, -0.1, 0.3, 0.05, -0.02, 0.04]))
    target = true.apply(pts)

    problem = Problem()
    pose_block = problem.add_block(PoseParams("T", Pose(np.eye(3), np.zeros(3))))

    def eval_fn(_):
        p = pose_block.pose
        pc = p.apply(pts)
        r = pc - target
        J = np.zeros((len(pts), 3, 6))
        J[:, :, :3] = np.eye(3)
        for k in range(len(pts)):
            x, y, z = pc[k]
            J[k, :, 3:] = -np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        return r, [J]

    problem.add_group(ResidualGroup(
        name="align", dim=3, params=[(pose_block, None)], eval_fn=eval_fn,
        sigma=np.ones(3)))
    assert check_jacobians(problem)["align"] < 1e-6
    report = solve(problem, SolverConfig(max_iterations=100))
    assert report.final_cost < 1e-14
    np.testing.assert_allclose(pose_block.pose.R, true.R, atol=1e-7)
    np.testing.assert_allclose(pose_block.pose.t, true.t, atol=1e-7)
