"""Scale-aligned reconstruction error and trajectory diagnostics.

Monocular reconstructions carry an arbitrary (and possibly drifting)
scale, so per-frame point error is measured after the closed-form
optimal scaling of the estimate onto the truth:

    s* = argmin_s sum_i |s X_i - X_i^gt|^2
       = sum_i <X_i, X_i^gt> / sum_i |X_i|^2

RMSE_t = sqrt(mean_i |s* X_i - X_i^gt|^2). The sequence value pools the
squared residuals of every (frame, point) pair. Because s* rescales any
uniform scaling away, the metric is invariant to scaling the estimated
cloud, which is exercised directly in the tests.

Pose error (ATE) is a separate diagnostic: camera centers are aligned
by a similarity (rotation, translation, scale) before the RMSE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


def optimal_scale(est: np.ndarray, gt: np.ndarray) -> float:
    """Closed-form scale minimizing |s*est - gt|^2 (0 for an empty set)."""
    est = np.atleast_2d(np.asarray(est, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if est.shape != gt.shape:
        raise ValueError("estimate and truth must have equal shapes")
    denom = float(np.sum(est * est))
    if denom == 0.0:
        return 0.0
    return float(np.sum(est * gt) / denom)


def rmse_frame(est: np.ndarray, gt: np.ndarray):
    """(scale-aligned RMSE, s*) for one frame's matched point sets."""
    est = np.atleast_2d(np.asarray(est, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    s = optimal_scale(est, gt)
    diff = s * est - gt
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1)))), s


@dataclass
class EvalReport:
    frames: list[int]
    rmse: list[float]             # per frame
    scales: list[float]
    counts: list[int]
    sequence_rmse: float
    ate: float | None = None
    extras: dict = field(default_factory=dict)

    def rows(self):
        return [(f, r, s, c) for f, r, s, c in
                zip(self.frames, self.rmse, self.scales, self.counts)]


def evaluate_sequence(est_points: dict[int, tuple[np.ndarray, np.ndarray]],
                      gt_points: dict[int, tuple[np.ndarray, np.ndarray]],
                      est_poses: dict[int, Pose] | None = None,
                      gt_poses: dict[int, Pose] | None = None) -> EvalReport:
    """Match per-frame (ids, points) by id, score, and pool.

    Frames present in only one input are skipped; within a frame, only
    ids present on both sides are compared.
    """
    frames, rmses, scales, counts = [], [], [], []
    pooled_sq = 0.0
    pooled_n = 0
    for f in sorted(set(est_points) & set(gt_points)):
        eids, epts = est_points[f]
        gids, gpts = gt_points[f]
        eids = np.asarray(eids, dtype=np.int64)
        gids = np.asarray(gids, dtype=np.int64)
        e_order = np.argsort(eids)
        g_order = np.argsort(gids)
        common, e_pos, g_pos = np.intersect1d(
            eids[e_order], gids[g_order], return_indices=True)
        if len(common) == 0:
            continue
        e = np.atleast_2d(epts)[e_order][e_pos]
        g = np.atleast_2d(gpts)[g_order][g_pos]
        r, s = rmse_frame(e, g)
        frames.append(f)
        rmses.append(r)
        scales.append(s)
        counts.append(len(common))
        pooled_sq += (r * r) * len(common)
        pooled_n += len(common)
    seq = float(np.sqrt(pooled_sq / pooled_n)) if pooled_n else float("nan")
    ate = None
    if est_poses and gt_poses:
        ate = ate_rmse(est_poses, gt_poses)
    return EvalReport(frames=frames, rmse=rmses, scales=scales, counts=counts,
                      sequence_rmse=seq, ate=ate)


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Similarity (s, R, t) minimizing |s R src + t - dst|^2."""
    src = np.atleast_2d(src)
    dst = np.atleast_2d(dst)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(d) @ S) / var_s) if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(est_poses: dict[int, Pose], gt_poses: dict[int, Pose]) -> float:
    """Absolute trajectory error of camera centers after similarity alignment.

    Poses are world-to-camera; centers are -R^T t.
    """
    frames = sorted(set(est_poses) & set(gt_poses))
    if len(frames) < 2:
        return float("nan")
    ec = np.array([-(est_poses[f].R.T @ est_poses[f].t) for f in frames])
    gc = np.array([-(gt_poses[f].R.T @ gt_poses[f].t) for f in frames])
    s, R, t = umeyama_alignment(ec, gc)
    diff = ec @ (s * R).T + t - gc
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


# ---------------------------------------------------------------- trend sweep

@dataclass
class TrendReport:
    """Deformation sweep summary: grid of sequence RMSE plus sanity verdicts."""

    amps: list[float]
    omegas: list[float]
    table: np.ndarray              # (len(amps), len(omegas)), nan when missing
    checks: dict[str, bool]
    text: str

    @property
    def all_passed(self) -> bool:
        return all(self.checks.values())


def trend_report(cells: list[dict]) -> TrendReport:
    """Summarize an amplitude/frequency sweep.

    Each cell is {"amp": A, "omega": w, "rmse": r}. Checks:
      * rigid_least: the rigid run has the smallest RMSE;
      * strict_order: rmse(0,*) < rmse(2.5,2.5) < rmse(10,5) where present;
      * omega_monotone: RMSE non-decreasing in omega for every A >= 5 row.
    """
    amps = sorted({float(c["amp"]) for c in cells})
    omegas = sorted({float(c["omega"]) for c in cells if float(c["amp"]) > 0})
    if not omegas:
        omegas = sorted({float(c["omega"]) for c in cells})
    table = np.full((len(amps), len(omegas)), np.nan)
    rigid = np.nan
    by_key = {}
    for c in cells:
        a, w, r = float(c["amp"]), float(c["omega"]), float(c["rmse"])
        by_key[(a, w)] = r
        if a == 0.0:
            rigid = r
            continue
        table[amps.index(a), omegas.index(w)] = r

    checks: dict[str, bool] = {}
    deforming = [v for (a, _), v in by_key.items() if a > 0]
    checks["rigid_least"] = bool(np.isfinite(rigid) and deforming
                                 and rigid < min(deforming))
    mid = by_key.get((2.5, 2.5))
    hi = by_key.get((10.0, 5.0))
    checks["strict_order"] = bool(
        np.isfinite(rigid) and mid is not None and hi is not None
        and rigid < mid < hi)
    mono = True
    for a in amps:
        if a < 5.0:
            continue
        row = [by_key.get((a, w)) for w in omegas]
        row = [v for v in row if v is not None]
        mono &= all(x <= y + 1e-12 for x, y in zip(row, row[1:]))
    checks["omega_monotone"] = bool(mono)

    lines = ["deformation sweep: sequence RMSE (scale-aligned, scene units)"]
    header = "A \\ omega | " + " | ".join(f"{w:7.2f}" for w in omegas)
    lines.append(header)
    lines.append("-" * len(header))
    if np.isfinite(rigid):
        lines.append(f"{0.0:9.2f} | " + " | ".join(
            f"{rigid:7.3f}" for _ in omegas))
    for i, a in enumerate(amps):
        if a == 0.0:
            continue
        cells_txt = []
        for j in range(len(omegas)):
            v = table[i, j]
            cells_txt.append(f"{v:7.3f}" if np.isfinite(v) else "      -")
        lines.append(f"{a:9.2f} | " + " | ".join(cells_txt))
    for name, ok in checks.items():
        lines.append(f"check {name}: {'pass' if ok else 'FAIL'}")
    return TrendReport(amps=amps, omegas=omegas, table=table, checks=checks,
                       text="\n".join(lines))
