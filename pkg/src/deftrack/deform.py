"""Per-frame joint camera pose and deformation tracking.

State per map point: a fixed anchor A_i (its triangulated position in
the world frame, which is the reference-camera frame) and a cumulative
displacement D_i. The frame-t estimate before solving is
X_i^{t-1} = A_i + D_i^{t-1}; the solve estimates a per-point increment
delta_i^t (initialized to zero every frame) and the frame pose T_t
jointly, minimizing

    sum_i  E_rep(u_i^t, T_t (X_i^{t-1} + delta_i))
         + lambda_spa * sum_j w_ij |delta_i - delta_j|_Sigma
         + lambda_tmp * |delta_i|_Sigma

with Huber kernels on each Sigma-normalized term (95th-percentile
chi-square thresholds for 2 and 3 dof). Accepting the solve commits
D^t = D^{t-1} + delta^t.

Per frame the pipeline is: constant-velocity pose prediction, a rigid
pose-only refinement on the previous map (skipped below min_rigid_obs
observations or when it diverges), deformation-graph construction (K
nearest neighbors at t-1, Gaussian weights), then the joint solve.
Points unobserved in the frame or with post-fit reprojection error
above the gate are marked lost and never revived.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nlls
from .config import DeformConfig, SolverConfig
from .geometry import CameraModel, Pose


@dataclass
class PointMap:
    """Map points: anchors, cumulative displacements, liveness."""

    ids: np.ndarray        # (N,)
    anchors: np.ndarray    # (N, 3), world frame
    disp: np.ndarray       # (N, 3) cumulative displacement D
    active: np.ndarray     # (N,) bool

    @staticmethod
    def from_init(ids, points) -> "PointMap":
        ids = np.asarray(ids, dtype=np.int64)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        order = np.argsort(ids)
        return PointMap(ids=ids[order], anchors=pts[order].copy(),
                        disp=np.zeros_like(pts), active=np.ones(len(ids), bool))

    def positions(self) -> np.ndarray:
        """Current estimates A + D for all points (lost ones included)."""
        return self.anchors + self.disp

    def n_active(self) -> int:
        return int(self.active.sum())

    def scale(self, s: float) -> None:
        self.anchors *= s
        self.disp *= s


@dataclass
class DeformationGraph:
    """K-nearest-neighbor smoothness edges over a point subset."""

    edges_i: np.ndarray    # (E,) local indices into the subset
    edges_j: np.ndarray    # (E,)
    weights: np.ndarray    # (E,) Gaussian affinities

    @property
    def n_edges(self) -> int:
        return len(self.weights)


def build_graph(positions: np.ndarray, knn: int, sigma: float) -> DeformationGraph:
    """Directed K-NN edges with weights exp(-d^2 / (2 sigma^2)).

    Each point connects to its K nearest others by Euclidean distance
    (all of them when fewer are available).
    """
    pts = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = pts.shape[0]
    k = min(knn, n - 1)
    if k <= 0:
        return DeformationGraph(np.zeros(0, np.int64), np.zeros(0, np.int64),
                                np.zeros(0))
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    ei = np.repeat(np.arange(n, dtype=np.int64), k)
    ej = nbr.astype(np.int64).ravel()
    w = np.exp(-d2[ei, ej] / (2.0 * sigma * sigma))
    return DeformationGraph(edges_i=ei, edges_j=ej, weights=w)


def predict_pose(pose_prev: Pose, pose_prev2: Pose) -> Pose:
    """Constant-velocity prediction: (T_{t-1} T_{t-2}^{-1}) T_{t-1}."""
    return pose_prev.compose(pose_prev2.inverse()).compose(pose_prev)


# ------------------------------------------------------------ residual groups

def _reprojection_group(camera: CameraModel, base: np.ndarray,
                        obs_px: np.ndarray, pose_block, delta_block,
                        point_idx, sigma, delta_sq, loss_scale=1.0,
                        name="reprojection"):
    """Residual u_hat - u_obs of projected (base + delta) points.

    ``base`` holds A + D^{t-1} for the observed points; ``point_idx``
    maps observation -> delta instance (identity in practice).
    """
    obs_px = np.asarray(obs_px, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    point_idx = np.asarray(point_idx, dtype=np.int64)

    def eval_fn(problem):
        T = pose_block.pose
        deltas = delta_block.values[point_idx]
        pts_w = base + deltas
        pts_c = T.apply(pts_w)
        pix, valid = camera.project(pts_c)
        Jpix, _ = camera.project_jacobian(pts_c)
        r = pix - obs_px
        # a candidate step may push points behind the camera: give those a
        # large constant residual (step gets rejected) and no gradient
        if not np.all(valid):
            r = np.where(valid[:, None], r, 1e4)
            Jpix = np.where(valid[:, None, None], Jpix, 0.0)
        n = len(obs_px)
        Jpose = np.zeros((n, 2, 6))
        Jpose[:, :, :3] = Jpix
        # d(pc)/d(phi) = -[pc]x for a left-multiplicative twist
        px_, py_, pz_ = pts_c[:, 0], pts_c[:, 1], pts_c[:, 2]
        neg_hat = np.zeros((n, 3, 3))
        neg_hat[:, 0, 1] = pz_
        neg_hat[:, 0, 2] = -py_
        neg_hat[:, 1, 0] = -pz_
        neg_hat[:, 1, 2] = px_
        neg_hat[:, 2, 0] = py_
        neg_hat[:, 2, 1] = -px_
        Jpose[:, :, 3:] = np.einsum("nij,njk->nik", Jpix, neg_hat)
        Jdelta = np.einsum("nij,jk->nik", Jpix, T.R)
        return r, [Jpose, Jdelta]

    return nlls.ResidualGroup(
        name=name, dim=2,
        params=[(pose_block, None), (delta_block, point_idx)],
        eval_fn=eval_fn, sigma=sigma, delta_sq=delta_sq, loss_scale=loss_scale)


def _spatial_group(graph: DeformationGraph, delta_block, sigma, delta_sq,
                   loss_scale):
    """w_ij (delta_i - delta_j) over the graph edges."""
    ei, ej, w = graph.edges_i, graph.edges_j, graph.weights

    def eval_fn(problem):
        d = delta_block.values
        r = (d[ei] - d[ej]) * w[:, None]
        eye = np.eye(3)
        Ji = np.broadcast_to(eye, (len(ei), 3, 3)) * w[:, None, None]
        return r, [Ji, -Ji]

    return nlls.ResidualGroup(
        name="spatial", dim=3,
        params=[(delta_block, ei), (delta_block, ej)],
        eval_fn=eval_fn, sigma=sigma, delta_sq=delta_sq, loss_scale=loss_scale)


def _temporal_group(delta_block, sigma, delta_sq, loss_scale):
    """delta_i: pull increments toward zero motion."""
    n = delta_block.n_instances
    idx = np.arange(n, dtype=np.int64)

    def eval_fn(problem):
        r = delta_block.values.copy()
        J = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return r, [J]

    return nlls.ResidualGroup(
        name="temporal", dim=3, params=[(delta_block, idx)],
        eval_fn=eval_fn, sigma=sigma, delta_sq=delta_sq, loss_scale=loss_scale)


def build_tracking_problem(camera: CameraModel, pose_init: Pose,
                           base_points: np.ndarray, obs_px: np.ndarray,
                           graph: DeformationGraph, cfg: DeformConfig,
                           fix_pose: bool = False, fix_delta: bool = False):
    """Assemble the joint problem; returns (problem, pose block, delta block)."""
    problem = nlls.Problem()
    pose_block = problem.add_block(nlls.PoseParams("pose", pose_init, fixed=fix_pose))
    n = len(base_points)
    delta_block = problem.add_block(nlls.EuclideanParams(
        "delta", np.zeros((n, 3)), fixed=fix_delta))
    point_idx = np.arange(n, dtype=np.int64)
    problem.add_group(_reprojection_group(
        camera, base_points, obs_px, pose_block, delta_block, point_idx,
        sigma=np.full(2, cfg.sigma_rep), delta_sq=nlls.CHI2_95_2DOF))
    if not fix_delta:
        if graph.n_edges:
            problem.add_group(_spatial_group(
                graph, delta_block, sigma=np.full(3, cfg.sigma_spa),
                delta_sq=nlls.CHI2_95_3DOF, loss_scale=cfg.lambda_spa))
        problem.add_group(_temporal_group(
            delta_block, sigma=np.full(3, cfg.sigma_tmp),
            delta_sq=nlls.CHI2_95_3DOF, loss_scale=cfg.lambda_tmp))
    return problem, pose_block, delta_block


def refine_pose_rigid(camera: CameraModel, pose_seed: Pose,
                      base_points: np.ndarray, obs_px: np.ndarray,
                      cfg: DeformConfig, solver_cfg: SolverConfig):
    """Pose-only robust refinement against the frozen previous map.

    Falls back to the seed when observations are scarce or the solve
    fails to improve anything.
    """
    if len(obs_px) < cfg.min_rigid_obs:
        return pose_seed.copy(), None
    empty_graph = DeformationGraph(np.zeros(0, np.int64), np.zeros(0, np.int64),
                                   np.zeros(0))
    problem, pose_block, _ = build_tracking_problem(
        camera, pose_seed, base_points, obs_px, empty_graph, cfg,
        fix_delta=True)
    report = nlls.solve(problem, solver_cfg)
    if not np.all(np.isfinite(pose_block.pose.t)) or report.final_cost > report.initial_cost:
        return pose_seed.copy(), report
    return pose_block.pose.orthonormalized(), report


@dataclass
class FrameResult:
    """Outcome of one tracked frame."""

    frame: int
    pose: Pose                  # world -> camera
    obs_ids: np.ndarray         # points used in the solve
    deltas: np.ndarray          # committed per-point increments (M, 3)
    lost_ids: np.ndarray
    cost_breakdown: dict
    solver_status: str
    n_lm_iterations: int
    mean_reproj_px: float
    records: list = field(default_factory=list)


class TrackingError(RuntimeError):
    """Raised when a frame cannot be tracked (too few observations)."""


def track_frame(camera: CameraModel, pmap: PointMap, frame: int,
                obs_ids: np.ndarray, obs_px: np.ndarray, pose_pred: Pose,
                cfg: DeformConfig, solver_cfg: SolverConfig) -> FrameResult:
    """Joint pose + deformation solve for one frame; commits into ``pmap``.

    Active points missing from the observations are marked lost before
    the solve; observations of unknown or lost ids are ignored.
    """
    obs_ids = np.asarray(obs_ids, dtype=np.int64)
    obs_px = np.atleast_2d(np.asarray(obs_px, dtype=np.float64))
    pos = np.searchsorted(pmap.ids, obs_ids)
    pos = np.clip(pos, 0, len(pmap.ids) - 1)
    known = pmap.ids[pos] == obs_ids
    usable = known & pmap.active[np.where(known, pos, 0)]
    midx = pos[usable]                      # map indices of solved points
    upx = obs_px[usable]

    # no-reacquisition: active points unobserved this frame are lost
    observed = np.zeros(len(pmap.ids), dtype=bool)
    observed[midx] = True
    newly_lost = pmap.active & ~observed
    pmap.active[newly_lost] = False

    if len(midx) < cfg.min_track_obs:
        raise TrackingError(
            f"frame {frame}: {len(midx)} usable observations, "
            f"need {cfg.min_track_obs}")

    base = pmap.positions()[midx]
    pose_seed, _ = refine_pose_rigid(camera, pose_pred, base, upx, cfg,
                                     solver_cfg)
    graph = build_graph(base, cfg.knn, cfg.nn_sigma)
    problem, pose_block, delta_block = build_tracking_problem(
        camera, pose_seed, base, upx, graph, cfg)
    report = nlls.solve(problem, solver_cfg)
    pose = pose_block.pose.orthonormalized()
    deltas = delta_block.values.copy()

    # commit increments, then gate on post-fit reprojection
    pmap.disp[midx] += deltas
    pts_c = pose.apply(pmap.positions()[midx])
    pix, valid = camera.project(pts_c)
    err = np.linalg.norm(pix - upx, axis=1)
    bad = ~valid | (err > cfg.lost_gate_px)
    lost_now = midx[bad]
    pmap.active[lost_now] = False
    mean_err = float(np.mean(err[~bad])) if np.any(~bad) else float("nan")

    return FrameResult(
        frame=frame,
        pose=pose,
        obs_ids=pmap.ids[midx].copy(),
        deltas=deltas,
        lost_ids=np.concatenate([pmap.ids[newly_lost], pmap.ids[lost_now]]),
        cost_breakdown=report.group_costs,
        solver_status=report.status,
        n_lm_iterations=report.iterations,
        mean_reproj_px=mean_err,
        records=report.records,
    )


class SequenceTracker:
    """Owns the map and pose history across a tracked sequence."""

    def __init__(self, camera: CameraModel, cfg: DeformConfig,
                 solver_cfg: SolverConfig | None = None):
        self.camera = camera
        self.cfg = cfg
        self.solver_cfg = solver_cfg or SolverConfig()
        self.pmap: PointMap | None = None
        self.poses: dict[int, Pose] = {}      # frame -> world-to-camera
        self.results: list[FrameResult] = []
        self._recent: list[Pose] = []

    def bootstrap(self, frame_ref: int, frame_partner: int, ids, points,
                  pose_partner: Pose, map_scale: float = 1.0) -> None:
        """Install the initial map; poses for the two bootstrap frames."""
        self.pmap = PointMap.from_init(ids, points)
        pose_partner = pose_partner.copy()
        if map_scale != 1.0:
            self.pmap.scale(map_scale)
            pose_partner.t = pose_partner.t * map_scale
        self.poses[frame_ref] = Pose.identity()
        self.poses[frame_partner] = pose_partner
        # the bootstrap gap spans several frames, so a velocity computed
        # from (T_0, T_k) overshoots; start from a standstill prediction
        self._recent = [pose_partner.copy(), pose_partner]

    def predicted(self) -> Pose:
        if len(self._recent) >= 2:
            return predict_pose(self._recent[-1], self._recent[-2])
        return self._recent[-1].copy()

    def step(self, frame: int, ids, pixels) -> FrameResult:
        if self.pmap is None:
            raise RuntimeError("bootstrap the tracker before stepping")
        result = track_frame(self.camera, self.pmap, frame,
                             np.asarray(ids), np.asarray(pixels),
                             self.predicted(), self.cfg, self.solver_cfg)
        self.poses[frame] = result.pose
        self._recent = [self._recent[-1], result.pose]
        self.results.append(result)
        return result

    def estimate_rows(self, frame: int):
        """(frame, id, x, y, z) rows of current active point estimates."""
        pm = self.pmap
        pts = pm.positions()[pm.active]
        ids = pm.ids[pm.active]
        return [(frame, int(i), p[0], p[1], p[2]) for i, p in zip(ids, pts)]
