"""Two-frame map bootstrap from ray correspondences.

Pipeline: 8-point essential matrix estimation inside RANSAC over unit
rays, decomposition into (R, t) with the smaller-angle rotation and the
translation sign fixed by cheirality, then inverse-depth-weighted
midpoint triangulation. The relative translation is returned with unit
norm: the baseline defines the scene unit until a scale is applied.

Conventions: correspondences (x0, x1) are unit rays in the reference
frame (index 0) and the partner frame; the recovered Pose maps frame-0
coordinates into the partner frame (x1 ~ R x0 + t up to depth), so
E = [t]x R satisfies x1^T E x0 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import InitConfig
from .geometry import CameraModel, Pose, so3_exp


class InitializationError(RuntimeError):
    """Raised when the two-frame bootstrap cannot produce a map."""


@dataclass
class RayCorrespondences:
    """Matched unit rays between the reference frame and a partner frame."""

    ids: np.ndarray      # (N,) feature ids
    rays0: np.ndarray    # (N, 3) unit rays, reference frame
    rays1: np.ndarray    # (N, 3) unit rays, partner frame

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        self.rays0 = np.atleast_2d(np.asarray(self.rays0, dtype=np.float64))
        self.rays1 = np.atleast_2d(np.asarray(self.rays1, dtype=np.float64))
        if not (len(self.ids) == len(self.rays0) == len(self.rays1)):
            raise ValueError("ids and ray arrays must have equal length")

    def __len__(self):
        return len(self.ids)


@dataclass
class InitResult:
    """Bootstrap output: partner-frame pose, triangulated points, masks."""

    pose: Pose                 # frame0 -> partner (world -> camera k), |t| = 1
    ids: np.ndarray            # ids of retained (triangulated) points
    points: np.ndarray         # (M, 3) in the reference (world) frame
    parallax_deg: np.ndarray   # per retained point
    n_input: int
    n_inliers: int
    essential: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))


def eight_point_essential(rays0: np.ndarray, rays1: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix from >= 8 ray pairs.

    Stacks the bilinear constraints x1^T E x0 = 0, takes the smallest
    right singular vector, then projects onto the essential manifold
    (equal nonzero singular values, third zero).
    """
    n = rays0.shape[0]
    if n < 8:
        raise ValueError("need at least 8 correspondences")
    A = (rays1[:, :, None] * rays0[:, None, :]).reshape(n, 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(E)
    sigma = 0.5 * (s[0] + s[1])
    E = U @ np.diag([sigma, sigma, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def epipolar_residuals(E: np.ndarray, rays0: np.ndarray, rays1: np.ndarray):
    """Angular epipolar residual per pair.

    For each side, the sine of the angle between the ray and the epipolar
    plane of its partner: |x1 . (E x0)| / |E x0| and |x0 . (E^T x1)| /
    |E^T x1|; the reported residual is the larger of the two.
    """
    n0 = rays0 @ E.T            # epipolar plane normals in frame 1: E x0
    n1 = rays1 @ E              # in frame 0: E^T x1
    num = np.abs(np.einsum("ij,ij->i", rays1, n0))
    d0 = np.linalg.norm(n0, axis=1)
    d1 = np.linalg.norm(n1, axis=1)
    d0 = np.where(d0 > 1e-15, d0, 1e-15)
    d1 = np.where(d1 > 1e-15, d1, 1e-15)
    return np.maximum(num / d0, num / d1)


def ransac_essential(rays0: np.ndarray, rays1: np.ndarray,
                     threshold_rad: float, iterations: int,
                     early_exit_fraction: float, rng: np.random.Generator):
    """RANSAC over 8-point samples; returns (E, inlier mask).

    The best model is re-estimated once on its consensus set. Exits
    early when an iteration's inlier fraction reaches the exit level.
    """
    n = rays0.shape[0]
    if n < 8:
        raise InitializationError(f"only {n} correspondences, need 8")
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        sample = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point_essential(rays0[sample], rays1[sample])
        except np.linalg.LinAlgError:
            continue
        resid = epipolar_residuals(E, rays0, rays1)
        mask = resid < threshold_rad
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count >= early_exit_fraction * n:
                break
    if best_mask is None or best_count < 8:
        raise InitializationError("RANSAC found no 8-inlier consensus")
    E = eight_point_essential(rays0[best_mask], rays1[best_mask])
    mask = epipolar_residuals(E, rays0, rays1) < threshold_rad
    if mask.sum() < 8:
        mask = best_mask
        E = eight_point_essential(rays0[mask], rays1[mask])
    return E, mask


def _signed_depths(R: np.ndarray, t: np.ndarray,
                   rays0: np.ndarray, rays1: np.ndarray):
    """Least-squares signed depths for x1 * d1 = R x0 * d0 + t."""
    f0 = rays0 @ R.T
    c01 = np.cross(f0, rays1)
    denom = np.einsum("ij,ij->i", c01, c01)
    denom = np.where(denom > 1e-30, denom, 1e-30)
    tf1 = np.cross(t[None, :], rays1)
    tf0 = np.cross(t[None, :], f0)
    d0 = -np.einsum("ij,ij->i", tf1, c01) / denom
    d1 = -np.einsum("ij,ij->i", tf0, c01) / denom
    return d0, d1


def decompose_essential(E: np.ndarray, rays0: np.ndarray,
                        rays1: np.ndarray) -> Pose:
    """Pick (R, t) from the four essential decompositions.

    Prefers the rotation with the smaller angle (both candidate
    translations checked by positive-depth count); if that choice
    explains under half the points, all four hypotheses compete on
    cheirality alone. |t| is normalized to exactly 1.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R_a = U @ W @ Vt
    R_b = U @ W.T @ Vt
    t_u = U[:, 2] / np.linalg.norm(U[:, 2])

    def angle(R):
        return np.arccos(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))

    def cheirality(R, t):
        d0, d1 = _signed_depths(R, t, rays0, rays1)
        return int(np.count_nonzero((d0 > 0) & (d1 > 0)))

    hypotheses = [(R_a, t_u), (R_a, -t_u), (R_b, t_u), (R_b, -t_u)]
    counts = [cheirality(R, t) for R, t in hypotheses]
    small = 0 if angle(R_a) <= angle(R_b) else 2
    pair = counts[small:small + 2]
    pick = small + int(np.argmax(pair))
    if counts[pick] < 0.5 * rays0.shape[0]:
        pick = int(np.argmax(counts))  # small-rotation prior was wrong
    R, t = hypotheses[pick]
    return Pose(R, t / np.linalg.norm(t))


def _hat(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def essential_from_pose(pose: Pose) -> np.ndarray:
    """E = [t]x R, Frobenius-normalized."""
    E = _hat(pose.t) @ pose.R
    return E / np.linalg.norm(E)


def refine_relative_pose(pose: Pose, rays0: np.ndarray, rays1: np.ndarray,
                         iterations: int = 12,
                         huber_rad: float | None = None) -> Pose:
    """Damped Gauss-Newton polish of (R, t) on the epipolar constraint.

    Minimizes the normalized residual x1.E(R,t) x0 / sqrt(|Ex0|^2 +
    |E^T x1|^2) over the 5 degrees of freedom (rotation twist plus the
    tangent plane of the unit translation). The linear 8-point solution
    minimizes an algebraic error; this polish minimizes the geometric
    one, roughly halving the direction error at realistic noise. With
    ``huber_rad`` set, rows beyond that residual are soft-clipped.
    """
    R = pose.R.copy()
    t = pose.t / np.linalg.norm(pose.t)
    lam = 1e-6

    def residuals(R, t):
        E = _hat(t) @ R
        n = np.einsum("ij,jk,ik->i", rays1, E, rays0)
        Ex0 = rays0 @ E.T
        Etx1 = rays1 @ E
        d = np.sqrt(np.einsum("ij,ij->i", Ex0, Ex0)
                    + np.einsum("ij,ij->i", Etx1, Etx1))
        return n / np.maximum(d, 1e-18)

    def weights(r):
        if huber_rad is None:
            return np.ones_like(r)
        a = np.abs(r)
        return np.sqrt(np.minimum(1.0, huber_rad / np.maximum(a, 1e-18)))

    r = residuals(R, t)
    cost = float(np.sum((weights(r) * r) ** 2))
    for _ in range(iterations):
        E = _hat(t) @ R
        n = np.einsum("ij,jk,ik->i", rays1, E, rays0)
        Ex0 = rays0 @ E.T
        Etx1 = rays1 @ E
        d2 = np.einsum("ij,ij->i", Ex0, Ex0) + np.einsum("ij,ij->i", Etx1, Etx1)
        d = np.sqrt(np.maximum(d2, 1e-30))
        r = n / d
        drdE = ((rays1[:, :, None] * rays0[:, None, :]) / d[:, None, None]
                - (n / d ** 3)[:, None, None]
                * (Ex0[:, :, None] * rays0[:, None, :]
                   + rays1[:, :, None] * Etx1[:, None, :]))
        tx = _hat(t)
        JR = np.stack([tx @ _hat(np.eye(3)[k]) @ R for k in range(3)], axis=-1)
        b1 = np.cross(t, np.array([0.0, 0.0, 1.0]))
        if np.linalg.norm(b1) < 1e-8:
            b1 = np.cross(t, np.array([0.0, 1.0, 0.0]))
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(t, b1)
        JT = np.stack([_hat(b1) @ R, _hat(b2) @ R], axis=-1)
        Jfull = np.concatenate([JR, JT], axis=-1)        # (3, 3, 5)
        J = np.einsum("nij,ijk->nk", drdE, Jfull)
        w = weights(r)
        Jw = J * w[:, None]
        rw = r * w
        H = Jw.T @ Jw + lam * np.eye(5)
        g = Jw.T @ rw
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        R_try = so3_exp(step[:3]) @ R
        t_try = t + b1 * step[3] + b2 * step[4]
        t_try /= np.linalg.norm(t_try)
        r_try = residuals(R_try, t_try)
        c_try = float(np.sum((weights(r_try) * r_try) ** 2))
        if c_try < cost:
            R, t, cost = R_try, t_try, c_try
            lam = max(lam * 0.3, 1e-12)
        else:
            lam *= 10.0
            if lam > 1e6:
                break
    return Pose(R, t / np.linalg.norm(t))


def triangulate_idwm(pose: Pose, rays0: np.ndarray, rays1: np.ndarray):
    """Inverse-depth-weighted midpoint triangulation.

    ``pose`` maps frame 0 into frame 1. Depths follow the sine rule of
    the (camera0, camera1, point) triangle; the two ray endpoints are
    averaged with weights 1/depth. Returns (points in frame 0, parallax
    angle in degrees, positive-depth mask).
    """
    c1 = -pose.R.T @ pose.t          # camera-1 center in frame 0
    f1 = rays1 @ pose.R              # partner rays rotated into frame 0
    cross01 = np.cross(rays0, f1)
    sin_par = np.linalg.norm(cross01, axis=1)
    denom = np.where(sin_par > 1e-15, sin_par, 1e-15)
    d0 = np.linalg.norm(np.cross(f1, c1[None, :]), axis=1) / denom
    d1 = np.linalg.norm(np.cross(rays0, c1[None, :]), axis=1) / denom
    p0 = rays0 * d0[:, None]
    p1 = c1[None, :] + f1 * d1[:, None]
    w0 = 1.0 / np.maximum(d0, 1e-12)
    w1 = 1.0 / np.maximum(d1, 1e-12)
    points = (p0 * w0[:, None] + p1 * w1[:, None]) / (w0 + w1)[:, None]
    parallax = np.degrees(np.arcsin(np.clip(sin_par, 0.0, 1.0)))
    z0 = np.einsum("ij,ij->i", points, rays0)
    z1 = np.einsum("ij,ij->i", pose.apply(points), rays1)
    in_front = (z0 > 0) & (z1 > 0)
    return points, parallax, in_front


# consensus widening and robust-clip radii for the final refinement,
# both expressed as multiples of the inlier threshold; the wide band
# avoids truncating the noise distribution while the tight clip keeps
# coherently displaced points from dragging the geometry
WIDE_FACTOR = 3.0
HUBER_FACTOR = 0.5


def initialize_map(camera: CameraModel, corr: RayCorrespondences,
                   cfg: InitConfig | None = None,
                   rng: np.random.Generator | None = None) -> InitResult:
    """Full bootstrap: RANSAC essential -> decompose -> triangulate -> cull.

    Culls non-inliers, parallax below the minimum, and negative-depth
    points. Raises InitializationError when fewer than min_inliers
    survive RANSAC or nothing survives the cull.
    """
    cfg = cfg or InitConfig()
    rng = rng or np.random.default_rng(0)
    threshold = np.arctan(cfg.inlier_pixels / camera.fx)
    E, mask = ransac_essential(corr.rays0, corr.rays1, threshold,
                               cfg.ransac_iterations, cfg.early_exit_fraction, rng)
    if int(mask.sum()) < cfg.min_inliers:
        raise InitializationError(
            f"{int(mask.sum())} epipolar inliers, need {cfg.min_inliers}")
    pose = decompose_essential(E, corr.rays0[mask], corr.rays1[mask])
    # polish on a widened consensus: the strict threshold truncates the
    # noise distribution and would bias the least-squares geometry, so
    # refit on a wider band and let the Huber clip bound the influence
    # of anything that is not plain noise
    wide = epipolar_residuals(E, corr.rays0, corr.rays1) < WIDE_FACTOR * threshold
    if int(wide.sum()) >= cfg.min_inliers:
        pose = refine_relative_pose(pose, corr.rays0[wide], corr.rays1[wide],
                                    huber_rad=HUBER_FACTOR * threshold)
    E = essential_from_pose(pose)
    final = epipolar_residuals(E, corr.rays0, corr.rays1) < threshold
    if int(final.sum()) < cfg.min_inliers:
        final = mask
    n_inliers = int(final.sum())
    r0 = corr.rays0[final]
    r1 = corr.rays1[final]
    points, parallax, in_front = triangulate_idwm(pose, r0, r1)
    keep = in_front & (parallax >= cfg.min_parallax_deg)
    if not np.any(keep):
        raise InitializationError("no triangulated point passed the cull")
    return InitResult(
        pose=pose,
        ids=corr.ids[final][keep],
        points=points[keep],
        parallax_deg=parallax[keep],
        n_input=len(corr),
        n_inliers=n_inliers,
        essential=E,
    )


def rays_from_pixels(camera: CameraModel, ids, px0, px1) -> RayCorrespondences:
    """Convenience: build correspondences by unprojecting matched pixels."""
    return RayCorrespondences(
        ids=np.asarray(ids),
        rays0=camera.unproject(np.asarray(px0, dtype=np.float64)),
        rays1=camera.unproject(np.asarray(px1, dtype=np.float64)),
    )
