"""Camera models and rigid transforms.

Two camera models are supported:

* ``pinhole`` with radial-tangential distortion (k1, k2, p1, p2, k3);
  fewer coefficients are zero-padded.
* ``fisheye`` with the equidistant model theta_d = theta * (1 + k1*theta^2
  + k2*theta^4 + k3*theta^6 + k4*theta^8).

Projection maps camera-frame points to pixels, unprojection maps pixels
to unit rays (iterative distortion inversion), and project_jacobian
returns the analytic 2x3 derivative of the pixel w.r.t. the camera-frame
point. All three are vectorized over a leading batch dimension.

Pose is a rigid transform x_out = R @ x_in + t. Twist vectors are
ordered (rho, phi): translation part first, rotation part second.
Increments compose on the left: T <- exp(xi) * T.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError, parse_kv_text

_UNDISTORT_ITERS = 10
_UNDISTORT_TOL = 1e-8


class CameraModel:
    """Intrinsic camera model (pinhole radial-tangential or equidistant fisheye)."""

    __slots__ = ("model", "width", "height", "fx", "fy", "cx", "cy", "dist")

    def __init__(self, model: str, width: int, height: int,
                 fx: float, fy: float, cx: float, cy: float,
                 dist=()):
        if model not in ("pinhole", "fisheye"):
            raise ValueError(f"unknown camera model {model!r}")
        dist = np.asarray(dist, dtype=np.float64).ravel()
        if model == "pinhole":
            if dist.size > 5:
                raise ValueError("pinhole distortion takes at most 5 coefficients")
            dist = np.concatenate([dist, np.zeros(5 - dist.size)])
        else:
            if dist.size > 4:
                raise ValueError("fisheye distortion takes at most 4 coefficients")
            dist = np.concatenate([dist, np.zeros(4 - dist.size)])
        if not (fx > 0 and fy > 0):
            raise ValueError("focal lengths must be positive")
        if width <= 0 or height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(dist)):
            raise ValueError("distortion coefficients must be finite")
        self.model = model
        self.width = int(width)
        self.height = int(height)
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.dist = dist

    # ---------------------------------------------------------------- project
    def project(self, points):
        """Camera-frame points (..., 3) -> pixels (..., 2) and a validity mask.

        Pinhole points need z > 0; fisheye points need a nonzero norm and
        to be off the exact backward axis. Invalid entries get pixel (0,0)
        and mask False.
        """
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        X, Y, Z = pts[..., 0], pts[..., 1], pts[..., 2]
        if self.model == "pinhole":
            valid = Z > 1e-12
            z = np.where(valid, Z, 1.0)
            x = X / z
            y = Y / z
            xd, yd = self._distort_radtan(x, y)
            u = self.fx * xd + self.cx
            v = self.fy * yd + self.cy
        else:
            rho = np.hypot(X, Y)
            norm = np.sqrt(X * X + Y * Y + Z * Z)
            valid = (norm > 1e-12) & ~((rho <= 1e-12) & (Z <= 0.0))
            theta = np.arctan2(rho, Z)
            theta_d = self._fisheye_theta_d(theta)
            safe_rho = np.where(rho > 1e-12, rho, 1.0)
            scale = np.where(rho > 1e-12, theta_d / safe_rho, 0.0)
            u = self.fx * scale * X + self.cx
            v = self.fy * scale * Y + self.cy
        pix = np.stack([np.where(valid, u, 0.0), np.where(valid, v, 0.0)], axis=-1)
        if single:
            return pix[0], bool(valid[0])
        return pix, valid

    def project_jacobian(self, points):
        """Analytic d(pixel)/d(camera point), shape (..., 2, 3), plus validity."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        X, Y, Z = pts[..., 0], pts[..., 1], pts[..., 2]
        J = np.zeros(pts.shape[:-1] + (2, 3))
        if self.model == "pinhole":
            valid = Z > 1e-12
            z = np.where(valid, Z, 1.0)
            x = X / z
            y = Y / z
            k1, k2, p1, p2, k3 = self.dist
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)  # d(radial)/d(r2)
            dxd_dx = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x
            dxd_dy = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
            dyd_dx = dxd_dy  # symmetric cross term
            dyd_dy = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x
            # chain through x = X/Z, y = Y/Z
            iz = 1.0 / z
            J[..., 0, 0] = self.fx * dxd_dx * iz
            J[..., 0, 1] = self.fx * dxd_dy * iz
            J[..., 0, 2] = self.fx * (-(dxd_dx * x + dxd_dy * y) * iz)
            J[..., 1, 0] = self.fy * dyd_dx * iz
            J[..., 1, 1] = self.fy * dyd_dy * iz
            J[..., 1, 2] = self.fy * (-(dyd_dx * x + dyd_dy * y) * iz)
        else:
            rho = np.hypot(X, Y)
            norm2 = X * X + Y * Y + Z * Z
            valid = (norm2 > 1e-24) & ~((rho <= 1e-12) & (Z <= 0.0))
            k = self.dist
            near_axis = rho <= 1e-9
            safe_rho = np.where(near_axis, 1.0, rho)
            theta = np.arctan2(rho, Z)
            t2 = theta * theta
            theta_d = theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))
            dtd = 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))
            denom = np.where(valid, norm2, 1.0)
            dth_dX = np.where(near_axis, 0.0, Z * X / (safe_rho * denom))
            dth_dY = np.where(near_axis, 0.0, Z * Y / (safe_rho * denom))
            dth_dZ = -rho / denom
            td = np.where(near_axis, 0.0, theta_d)
            # d(X/rho)/d(X,Y), zero w.r.t. Z
            dxr_dX = np.where(near_axis, 0.0, Y * Y / safe_rho**3)
            dxr_dY = np.where(near_axis, 0.0, -X * Y / safe_rho**3)
            dyr_dY = np.where(near_axis, 0.0, X * X / safe_rho**3)
            xr = np.where(near_axis, 0.0, X / safe_rho)
            yr = np.where(near_axis, 0.0, Y / safe_rho)
            J[..., 0, 0] = self.fx * (dtd * dth_dX * xr + td * dxr_dX)
            J[..., 0, 1] = self.fx * (dtd * dth_dY * xr + td * dxr_dY)
            J[..., 0, 2] = self.fx * dtd * dth_dZ * xr
            J[..., 1, 0] = self.fy * (dtd * dth_dX * yr + td * dxr_dY)
            J[..., 1, 1] = self.fy * (dtd * dth_dY * yr + td * dyr_dY)
            J[..., 1, 2] = self.fy * dtd * dth_dZ * yr
            # On the optical axis the equidistant model reduces to the
            # pinhole limit u = fx * X/Z + cx.
            if np.any(near_axis & valid):
                sel = near_axis & valid
                zsel = Z[sel]
                J[sel] = 0.0
                J[..., 0, 0][sel] = self.fx / zsel
                J[..., 0, 2][sel] = 0.0
                J[..., 1, 1][sel] = self.fy / zsel
        J[~valid] = 0.0
        if single:
            return J[0], bool(valid[0])
        return J, valid

    # -------------------------------------------------------------- unproject
    def unproject(self, pixels):
        """Pixels (..., 2) -> unit rays (..., 3) in the camera frame."""
        pix = np.asarray(pixels, dtype=np.float64)
        single = pix.ndim == 1
        pix = np.atleast_2d(pix)
        mx = (pix[..., 0] - self.cx) / self.fx
        my = (pix[..., 1] - self.cy) / self.fy
        if self.model == "pinhole":
            x, y = self._undistort_radtan(mx, my)
            rays = np.stack([x, y, np.ones_like(x)], axis=-1)
            rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        else:
            theta_d = np.hypot(mx, my)
            theta = self._fisheye_invert(theta_d)
            small = theta_d <= 1e-12
            safe = np.where(small, 1.0, theta_d)
            st = np.sin(theta)
            rays = np.stack([
                np.where(small, 0.0, st * mx / safe),
                np.where(small, 0.0, st * my / safe),
                np.cos(theta),
            ], axis=-1)
        if single:
            return rays[0]
        return rays

    # -------------------------------------------------------------- internals
    def _distort_radtan(self, x, y):
        k1, k2, p1, p2, k3 = self.dist
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        return xd, yd

    def _undistort_radtan(self, xd, yd):
        k1, k2, p1, p2, k3 = self.dist
        x = xd.copy()
        y = yd.copy()
        for _ in range(_UNDISTORT_ITERS):
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            x_new = (xd - dx) / radial
            y_new = (yd - dy) / radial
            delta = np.max(np.abs(x_new - x) + np.abs(y_new - y)) if x.size else 0.0
            x, y = x_new, y_new
            if delta < _UNDISTORT_TOL:
                break
        return x, y

    def _fisheye_theta_d(self, theta):
        k = self.dist
        t2 = theta * theta
        return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))

    def _fisheye_invert(self, theta_d):
        k = self.dist
        theta = theta_d.copy()
        for _ in range(_UNDISTORT_ITERS):
            t2 = theta * theta
            f = theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3])))) - theta_d
            fp = 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))
            step = f / fp
            theta = theta - step
            if theta.size and np.max(np.abs(step)) < _UNDISTORT_TOL:
                break
        return theta

    def pixel_grid_rays(self):
        """Unit rays for every pixel center, shape (height, width, 3)."""
        us, vs = np.meshgrid(np.arange(self.width, dtype=np.float64),
                             np.arange(self.height, dtype=np.float64))
        pix = np.stack([us, vs], axis=-1).reshape(-1, 2)
        return self.unproject(pix).reshape(self.height, self.width, 3)

    def contains(self, pixels, margin: float = 0.0):
        """Mask of pixels inside the image rectangle with a margin."""
        pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        ok = ((pix[..., 0] >= margin) & (pix[..., 0] <= self.width - 1 - margin)
              & (pix[..., 1] >= margin) & (pix[..., 1] <= self.height - 1 - margin))
        return ok


# ---------------------------------------------------------------------- poses

def _hat(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


class Pose:
    """Rigid transform: apply(x) = R @ x + t."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.array(R, dtype=np.float64)
        self.t = np.zeros(3) if t is None else np.array(t, dtype=np.float64).ravel()
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and length-3 translation")

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying ``other`` first, then ``self``."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def orthonormalized(self) -> "Pose":
        """Project R back onto SO(3) (nearest rotation by SVD)."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.t.copy())

    def rotation_angle(self) -> float:
        c = (np.trace(self.R) - 1.0) * 0.5
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_quaternion(self):
        """Quaternion (qx, qy, qz, qw), unit norm, qw >= 0."""
        R = self.R
        t = np.trace(R)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            qw = 0.25 * s
            qx = (R[2, 1] - R[1, 2]) / s
            qy = (R[0, 2] - R[2, 0]) / s
            qz = (R[1, 0] - R[0, 1]) / s
        else:
            i = int(np.argmax(np.diag(R)))
            if i == 0:
                s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
                qw = (R[2, 1] - R[1, 2]) / s
                qx = 0.25 * s
                qy = (R[0, 1] + R[1, 0]) / s
                qz = (R[0, 2] + R[2, 0]) / s
            elif i == 1:
                s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
                qw = (R[0, 2] - R[2, 0]) / s
                qx = (R[0, 1] + R[1, 0]) / s
                qy = 0.25 * s
                qz = (R[1, 2] + R[2, 1]) / s
            else:
                s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
                qw = (R[1, 0] - R[0, 1]) / s
                qx = (R[0, 2] + R[2, 0]) / s
                qy = (R[1, 2] + R[2, 1]) / s
                qz = 0.25 * s
        q = np.array([qx, qy, qz, qw])
        q /= np.linalg.norm(q)
        if q[3] < 0 or (q[3] == 0 and (q[np.nonzero(q)[0][0]] < 0 if np.any(q) else False)):
            q = -q
        return q

    @staticmethod
    def from_quaternion(q, t=None) -> "Pose":
        """Quaternion (qx, qy, qz, qw) -> Pose."""
        qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
        R = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ])
        return Pose(R, np.zeros(3) if t is None else t)

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=4)}, angle={np.degrees(self.rotation_angle()):.2f}deg)"


def so3_exp(phi):
    """Rotation vector -> rotation matrix (Rodrigues)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    if theta < 1e-8:
        # second-order Taylor keeps orthonormality to machine precision here
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation matrix -> rotation vector."""
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if theta > np.pi - 1e-5:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        A = R + np.eye(3)
        col = int(np.argmax(np.linalg.norm(A, axis=0)))
        axis = A[:, col] / np.linalg.norm(A[:, col])
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def se3_exp(xi) -> Pose:
    """Twist (rho, phi) -> Pose. Translation part first."""
    xi = np.asarray(xi, dtype=np.float64).ravel()
    if xi.shape != (6,):
        raise ValueError("twist must have 6 entries")
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    R = so3_exp(phi)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        t2 = theta * theta
        V = (np.eye(3)
             + (1.0 - np.cos(theta)) / t2 * K
             + (theta - np.sin(theta)) / (t2 * theta) * (K @ K))
    return Pose(R, V @ rho)


def se3_log(pose: Pose):
    """Pose -> twist (rho, phi); inverse of se3_exp."""
    phi = so3_log(pose.R)
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    if theta < 1e-8:
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        t2 = theta * theta
        coef = (1.0 / t2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
        Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    return np.concatenate([Vinv @ pose.t, phi])


# ------------------------------------------------------------- calibration IO

def save_calibration(path, cam: CameraModel) -> None:
    lines = [
        f"model = {cam.model}",
        f"width = {cam.width}",
        f"height = {cam.height}",
        f"fx = {cam.fx!r}",
        f"fy = {cam.fy!r}",
        f"cx = {cam.cx!r}",
        f"cy = {cam.cy!r}",
        "dist = " + " ".join(repr(d) for d in cam.dist.tolist()),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_calibration(path) -> CameraModel:
    """Read a camera from the plain-text calibration format (see README)."""
    with open(path, "r", encoding="utf-8") as fh:
        kv = parse_kv_text(fh.read())
    required = ("model", "width", "height", "fx", "fy", "cx", "cy")
    missing = [k for k in required if k not in kv]
    if missing:
        raise ConfigError(f"calibration file missing keys: {missing}")
    dist = tuple(float(x) for x in kv.get("dist", "").split()) if kv.get("dist") else ()
    try:
        return CameraModel(
            model=kv["model"],
            width=int(kv["width"]), height=int(kv["height"]),
            fx=float(kv["fx"]), fy=float(kv["fy"]),
            cx=float(kv["cx"]), cy=float(kv["cy"]),
            dist=dist,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
