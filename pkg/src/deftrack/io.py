"""CSV and PLY writers/readers for run artifacts.

All floats are written with repr (shortest round-trip form), so files
from identical runs are byte-identical and reload exactly.
"""

from __future__ import annotations

import csv

import numpy as np

from .geometry import Pose


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """(header, list of string rows).  Callers coerce types."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r if row]


# ----------------------------------------------------------------------- poses

POSE_HEADER = ["frame", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


def pose_row(frame: int, pose_wc: Pose):
    """CSV row from a camera-to-world pose (translation = camera center)."""
    q = pose_wc.to_quaternion()
    t = pose_wc.t
    return (frame, t[0], t[1], t[2], q[0], q[1], q[2], q[3])


def write_poses_csv(path, poses_cw: dict[int, Pose]) -> None:
    """Write world-to-camera poses as camera-to-world rows, frame order."""
    rows = [pose_row(f, poses_cw[f].inverse()) for f in sorted(poses_cw)]
    write_csv(path, POSE_HEADER, rows)


def read_poses_csv(path) -> dict[int, Pose]:
    """Read back as world-to-camera poses (inverse of the stored rows)."""
    header, rows = read_csv(path)
    if header != POSE_HEADER:
        raise ValueError(f"unexpected pose CSV header in {path}: {header}")
    out: dict[int, Pose] = {}
    for row in rows:
        f = int(row[0])
        t = np.array([float(v) for v in row[1:4]])
        q = np.array([float(v) for v in row[4:8]])
        out[f] = Pose.from_quaternion(q, t).inverse()
    return out


# ---------------------------------------------------------------------- points

def write_ply(path, points: np.ndarray, ids: np.ndarray | None = None) -> None:
    """ASCII PLY point cloud with an optional per-point id property."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if ids is not None:
            fh.write("property int id\n")
        fh.write("end_header\n")
        if ids is None:
            for p in points:
                fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        else:
            for p, i in zip(points, ids):
                fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(i)}\n")


def read_ply(path):
    """Read an ASCII PLY written by write_ply: (points, ids-or-None)."""
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path} is not a PLY file")
        n = 0
        has_id = False
        while True:
            line = fh.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line == "property int id":
                has_id = True
            elif line == "end_header":
                break
            elif not line:
                raise ValueError(f"{path}: truncated header")
        pts = np.zeros((n, 3))
        ids = np.zeros(n, dtype=np.int64) if has_id else None
        for k in range(n):
            toks = fh.readline().split()
            pts[k] = [float(toks[0]), float(toks[1]), float(toks[2])]
            if has_id:
                ids[k] = int(toks[3])
    return pts, ids


# ---------------------------------------------------------- per-frame tables

POINTS_HEADER = ["frame", "id", "x", "y", "z"]


def write_points_csv(path, rows) -> None:
    """(frame, id, x, y, z) rows: trajectories or ground-truth positions."""
    write_csv(path, POINTS_HEADER, rows)


def read_points_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """{frame: (ids, points)} from a (frame, id, x, y, z) table."""
    header, rows = read_csv(path)
    if header != POINTS_HEADER:
        raise ValueError(f"unexpected points CSV header in {path}: {header}")
    frames: dict[int, list] = {}
    for row in rows:
        frames.setdefault(int(row[0]), []).append(
            (int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    out = {}
    for f, items in frames.items():
        arr = np.array(items, dtype=np.float64)
        out[f] = (arr[:, 0].astype(np.int64), arr[:, 1:4])
    return out


TRACKS_HEADER = ["frame", "id", "x", "y", "alpha", "beta", "ssim", "status"]


def write_tracks_csv(path, rows) -> None:
    write_csv(path, TRACKS_HEADER, rows)


OBS_HEADER = ["frame", "id", "u", "v"]


def write_observations_csv(path, obs_sets) -> None:
    rows = []
    for o in obs_sets:
        for i, p in zip(o.ids, o.pixels):
            rows.append((o.frame, int(i), p[0], p[1]))
    write_csv(path, OBS_HEADER, rows)


def read_observations_csv(path):
    """List of (frame, ids, pixels) triples sorted by frame."""
    header, rows = read_csv(path)
    if header != OBS_HEADER:
        raise ValueError(f"unexpected observations CSV header in {path}: {header}")
    frames: dict[int, list] = {}
    for row in rows:
        frames.setdefault(int(row[0]), []).append(
            (int(row[1]), float(row[2]), float(row[3])))
    out = []
    for f in sorted(frames):
        arr = np.array(frames[f], dtype=np.float64)
        out.append((f, arr[:, 0].astype(np.int64), arr[:, 1:3]))
    return out


EVAL_HEADER = ["frame", "rmse", "scale", "n_points"]


def write_eval_csv(path, report) -> None:
    write_csv(path, EVAL_HEADER, report.rows())
