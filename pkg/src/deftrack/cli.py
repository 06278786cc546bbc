"""Command-line pipeline: sim, track, eval, full.

    deftrack sim   --out DIR [--config FILE] [--set key=value ...]
    deftrack track --calib FILE (--images DIR | --obs FILE) --out DIR ...
    deftrack eval  --est-points FILE --gt-points FILE [--est-poses FILE
                    --gt-poses FILE] [--out DIR]
    deftrack full  --out DIR [--config FILE] [--set key=value ...]

Exit codes: 0 success, 2 configuration/usage error, 3 map
initialization failure, 4 tracking failure mid-sequence. ``full`` runs
simulate -> track -> evaluate in one process; its tracking source is
``source = observations`` (ideal noisy tracks from the simulator, ids
shared with the truth) or ``source = rendered`` (renders frames, runs
the photometric tracker, truth comes from ray-cast rest coordinates).

Every run writes manifest.txt: the resolved configuration, package and
dependency versions, kernel backend, and the command line. Reusing the
manifest as ``--config`` reproduces the run bit for bit.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__, evaluate, io, kernels, sim
from .config import ConfigError, RunConfig, config_text, load_run_config
from .deform import SequenceTracker, TrackingError
from .geometry import CameraModel, load_calibration, save_calibration
from .image import build_pyramid, detect_features, load_image_folder, save_pgm, save_png
from .initializer import InitializationError, initialize_map, rays_from_pixels
from .tracker import TrackSession

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INIT = 3
EXIT_TRACKING = 4


def _write_manifest(outdir: str, cfg: RunConfig, argv: list[str]) -> None:
    import numba
    import scipy
    lines = [
        "# deftrack run manifest: reusable as --config for reproduction",
        f"# command: {' '.join(argv)}",
        f"# deftrack {__version__}  numpy {np.__version__}  scipy {scipy.__version__}"
        f"  numba {numba.__version__}  kernel backend {kernels.BACKEND}",
        config_text(cfg).rstrip(),
    ]
    with open(os.path.join(outdir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_sets(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set wants key=value, got {p!r}")
        k, _, v = p.partition("=")
        out[k.strip()] = v.strip()
    return out


# ------------------------------------------------------------------- tracking

def _obs_from_images(images, camera, cfg: RunConfig, tracks_log=None):
    """Run detection + photometric tracking; return per-frame observations."""
    session = TrackSession(cfg.tracker)
    obs = []
    for image in images:
        pyr = build_pyramid(image, cfg.tracker.levels, cfg.tracker.patch_size)
        if image.frame_index == 0 or not session.features:
            pos, _ = detect_features(image, cfg.detector)
            session.start(pyr, pos)
        else:
            session.track(pyr)
        ids, px = session.observations()
        obs.append((image.frame_index, ids, px))
        if tracks_log is not None:
            tracks_log.extend(session.track_rows(image.frame_index))
    return obs, session


def run_tracking_core(camera: CameraModel, obs_list, cfg: RunConfig,
                      map_scale=None):
    """Initialize from two frames, then track every later frame.

    ``obs_list`` is [(frame, ids, pixels)] sorted by frame. ``map_scale``
    is a float, or a callable (frame0, partner_frame) -> float evaluated
    once the partner is known, or None for the configured value. Returns
    the SequenceTracker plus per-frame estimate rows and init
    diagnostics. Raises InitializationError / TrackingError.
    """
    if len(obs_list) < cfg.init.gap + 1:
        raise InitializationError(
            f"{len(obs_list)} frames of observations, need {cfg.init.gap + 1}")
    f0, ids0, px0 = obs_list[0]
    by_id0 = {int(i): k for k, i in enumerate(ids0)}
    init_result = None
    partner_pos = None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 271]))
    errors = []
    for pos in range(cfg.init.gap, len(obs_list)):
        fk, idsk, pxk = obs_list[pos]
        common = [(by_id0[int(i)], k) for k, i in enumerate(idsk)
                  if int(i) in by_id0]
        if len(common) < cfg.init.min_inliers:
            errors.append(f"frame {fk}: {len(common)} shared tracks")
            continue
        sel0 = np.array([c[0] for c in common], dtype=np.int64)
        selk = np.array([c[1] for c in common], dtype=np.int64)
        corr = rays_from_pixels(camera, ids0[sel0], px0[sel0], pxk[selk])
        try:
            candidate = initialize_map(camera, corr, cfg.init, rng)
        except InitializationError as exc:
            errors.append(f"frame {fk}: {exc}")
            continue
        floor = max(cfg.init.min_map_points,
                    int(np.ceil(cfg.init.min_map_fraction * len(common))))
        if len(candidate.ids) < floor:
            errors.append(f"frame {fk}: map kept {len(candidate.ids)} of "
                          f"{len(common)} tracks, wanted {floor}")
            continue
        init_result = candidate
        partner_pos = pos
        break
    if init_result is None:
        raise InitializationError(
            "two-frame initialization failed on every candidate pair: "
            + "; ".join(errors[-5:]))

    fk = obs_list[partner_pos][0]
    if map_scale is None:
        scale = cfg.init.map_scale
    elif callable(map_scale):
        scale = float(map_scale(f0, fk))
    else:
        scale = float(map_scale)
    tracker = SequenceTracker(camera, cfg.deform, cfg.solver)
    tracker.bootstrap(f0, fk, init_result.ids, init_result.points,
                      init_result.pose, map_scale=scale)
    estimate_rows = []
    estimate_rows.extend(tracker.estimate_rows(f0))
    estimate_rows.extend(tracker.estimate_rows(fk))
    for pos in range(partner_pos + 1, len(obs_list)):
        f, ids, px = obs_list[pos]
        try:
            tracker.step(f, ids, px)
        except TrackingError as exc:
            # hand partial results to the caller for flushing to disk
            exc.tracker = tracker
            exc.estimate_rows = estimate_rows
            exc.init_result = init_result
            exc.failure_frame = f
            raise
        estimate_rows.extend(tracker.estimate_rows(f))
    return tracker, estimate_rows, init_result, fk


# ------------------------------------------------------------------- commands

def cmd_sim(args, argv) -> int:
    cfg = load_run_config(args.config, _parse_sets(args.set))
    os.makedirs(args.out, exist_ok=True)
    scene = sim.build_scene(cfg.sim)
    _write_manifest(args.out, cfg, argv)
    save_calibration(os.path.join(args.out, "calib.txt"), scene.camera)
    obs = sim.emit_observations(scene)
    io.write_observations_csv(os.path.join(args.out, "observations.csv"), obs)
    tracked0 = obs[0].ids
    io.write_points_csv(os.path.join(args.out, "truth_points.csv"),
                        sim.truth_rows(scene, tracked0))
    io.write_poses_csv(os.path.join(args.out, "gt_poses.csv"),
                       {f: scene.world_to_camera(f) for f in range(scene.n_frames)})
    if not args.no_frames:
        frame_dir = os.path.join(args.out, "frames")
        os.makedirs(frame_dir, exist_ok=True)
        writer = save_png if cfg.sim.image_format == "png" else save_pgm
        ext = cfg.sim.image_format
        for f in range(scene.n_frames):
            img = scene.render_frame(f)
            writer(os.path.join(frame_dir, f"frame_{f:05d}.{ext}"), img)
    print(f"sim: {scene.n_frames} frames, {len(tracked0)} tracked vertices "
          f"-> {args.out}")
    return EXIT_OK


def _write_tracking_outputs(outdir, tracker, estimate_rows, tracks_log=None):
    io.write_poses_csv(os.path.join(outdir, "poses.csv"), tracker.poses)
    io.write_points_csv(os.path.join(outdir, "trajectories.csv"), estimate_rows)
    if tracker.pmap is not None:
        pm = tracker.pmap
        io.write_ply(os.path.join(outdir, "map_final.ply"),
                     pm.positions()[pm.active], pm.ids[pm.active])
    if tracks_log:
        io.write_tracks_csv(os.path.join(outdir, "tracks.csv"), tracks_log)


def cmd_track(args, argv) -> int:
    cfg = load_run_config(args.config, _parse_sets(args.set))
    camera = load_calibration(args.calib)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, cfg, argv)
    tracks_log: list = []
    if args.images:
        obs_list, _ = _obs_from_images(load_image_folder(args.images), camera,
                                       cfg, tracks_log)
    else:
        obs_list = io.read_observations_csv(args.obs)
    tracker = None
    estimate_rows: list = []
    try:
        tracker, estimate_rows, init_result, fk = run_tracking_core(
            camera, obs_list, cfg)
    except TrackingError as exc:
        # flush the frames that did track before reporting failure
        tracker = getattr(exc, "tracker", None)
        estimate_rows = getattr(exc, "estimate_rows", [])
        raise
    finally:
        if tracker is not None:
            _write_tracking_outputs(args.out, tracker, estimate_rows, tracks_log)
        elif tracks_log:
            io.write_tracks_csv(os.path.join(args.out, "tracks.csv"), tracks_log)
    print(f"track: initialized at frame {fk} with {len(init_result.ids)} points "
          f"({init_result.n_inliers} epipolar inliers); "
          f"{len(tracker.results)} frames tracked -> {args.out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    est_points = io.read_points_csv(args.est_points)
    gt_points = io.read_points_csv(args.gt_points)
    est_poses = io.read_poses_csv(args.est_poses) if args.est_poses else None
    gt_poses = io.read_poses_csv(args.gt_poses) if args.gt_poses else None
    report = evaluate.evaluate_sequence(est_points, gt_points,
                                        est_poses, gt_poses)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        io.write_eval_csv(os.path.join(args.out, "eval_report.csv"), report)
    print(f"eval: {len(report.frames)} frames, sequence RMSE "
          f"{report.sequence_rmse:.6f}"
          + (f", ATE {report.ate:.6f}" if report.ate is not None else ""))
    return EXIT_OK


def run_full(cfg: RunConfig, outdir: str | None = None, argv=None,
             save_frames: bool = False):
    """simulate -> track -> evaluate; returns (report, tracker, scene).

    With outdir set, writes the full artifact set. Raises on init or
    tracking failure after flushing whatever was produced.
    """
    scene = sim.build_scene(cfg.sim)
    camera = scene.camera
    gt_poses = {f: scene.world_to_camera(f) for f in range(scene.n_frames)}
    tracks_log: list = []
    # the tracker's world frame is the camera frame of the reference
    # image, so truth is expressed there too (shared frame, scale apart)
    to_tracker_world = gt_poses[0]
    if cfg.source == "rendered":
        images = [scene.render_frame(f) for f in range(scene.n_frames)]
        obs_list, session = _obs_from_images(images, camera, cfg, tracks_log)
        det_ids, det_px = obs_list[0][1], obs_list[0][2]
        rest, _, hit = scene.raycast(0, det_px)
        gt_rest = {int(i): rest[k] for k, i in enumerate(det_ids) if hit[k]}
        ids = np.array(sorted(gt_rest), dtype=np.int64)
        rests = (np.array([gt_rest[int(i)] for i in ids])
                 if len(ids) else np.zeros((0, 3)))
        gt_points = {}
        for f in range(scene.n_frames):
            if len(ids) == 0:
                continue
            world = sim.deform_vertices(rests, cfg.sim.amp, cfg.sim.omega,
                                        scene.frame_time(f),
                                        cfg.sim.phase_scale)
            gt_points[f] = (ids, to_tracker_world.apply(world))
    else:
        obs_sets = sim.emit_observations(scene)
        obs_list = [(o.frame, o.ids, o.pixels) for o in obs_sets]
        tracked0 = obs_sets[0].ids
        sel = np.searchsorted(scene.ids, tracked0)
        gt_points = {f: (tracked0, to_tracker_world.apply(scene.vertices_at(f)[sel]))
                     for f in range(scene.n_frames)}

    if outdir:
        os.makedirs(outdir, exist_ok=True)
        if argv is not None:
            _write_manifest(outdir, cfg, argv)
        save_calibration(os.path.join(outdir, "calib.txt"), camera)
        io.write_poses_csv(os.path.join(outdir, "gt_poses.csv"), gt_poses)
        rows = [(f, int(i), p[0], p[1], p[2])
                for f, (ids, pts) in sorted(gt_points.items())
                for i, p in zip(ids, pts)]
        io.write_points_csv(os.path.join(outdir, "truth_points.csv"), rows)
        obs_sets_out = [sim.ObservationSet(frame=f, ids=i, pixels=p)
                        for f, i, p in obs_list]
        io.write_observations_csv(os.path.join(outdir, "observations.csv"),
                                  obs_sets_out)
        if save_frames and cfg.source == "rendered":
            frame_dir = os.path.join(outdir, "frames")
            os.makedirs(frame_dir, exist_ok=True)
            for img in images:
                save_png(os.path.join(frame_dir,
                                      f"frame_{img.frame_index:05d}.png"), img)

    # ground-truth baseline fixes the regularizer units (monocular scale
    # is baseline-relative); evaluation still fits per-frame scale
    def gt_baseline(f0, fk):
        c0 = -(gt_poses[f0].R.T @ gt_poses[f0].t)
        ck = -(gt_poses[fk].R.T @ gt_poses[fk].t)
        return float(np.linalg.norm(ck - c0))

    try:
        tracker, estimate_rows, init_result, fk, report = _full_core(
            camera, obs_list, cfg, gt_baseline, gt_points, gt_poses)
    except TrackingError as exc:
        if outdir and getattr(exc, "tracker", None) is not None:
            _write_tracking_outputs(outdir, exc.tracker, exc.estimate_rows,
                                    tracks_log)
        raise
    if outdir:
        _write_tracking_outputs(outdir, tracker, estimate_rows, tracks_log)
        io.write_eval_csv(os.path.join(outdir, "eval_report.csv"), report)
        with open(os.path.join(outdir, "eval_summary.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(f"frames_evaluated = {len(report.frames)}\n")
            fh.write(f"sequence_rmse = {report.sequence_rmse!r}\n")
            fh.write(f"ate = {report.ate!r}\n")
            fh.write(f"init_frame = {fk}\n")
            fh.write(f"init_points = {len(init_result.ids)}\n")
    return report, tracker, scene


def _full_core(camera, obs_list, cfg, gt_baseline, gt_points, gt_poses):
    tracker, estimate_rows, init_result, fk = run_tracking_core(
        camera, obs_list, cfg, map_scale=gt_baseline)
    est_points = {}
    for f, i, x, y, z in [tuple(r) for r in estimate_rows]:
        est_points.setdefault(f, []).append((i, x, y, z))
    est_dict = {}
    for f, items in est_points.items():
        arr = np.array([(x, y, z) for _, x, y, z in items])
        ids = np.array([i for i, *_ in items], dtype=np.int64)
        est_dict[f] = (ids, arr)
    report = evaluate.evaluate_sequence(est_dict, gt_points,
                                        tracker.poses, gt_poses)
    return tracker, estimate_rows, init_result, fk, report


def cmd_full(args, argv) -> int:
    cfg = load_run_config(args.config, _parse_sets(args.set))
    report, tracker, _ = run_full(cfg, args.out, argv,
                                  save_frames=args.save_frames)
    print(f"full: {len(report.frames)} frames evaluated, sequence RMSE "
          f"{report.sequence_rmse:.6f}, ATE {report.ate:.6f} -> {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- entrypoint

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deftrack",
        description="monocular deformable-scene tracking pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable)")

    ps = sub.add_parser("sim", parents=[common],
                        help="render a synthetic scene with ground truth")
    ps.add_argument("--out", required=True)
    ps.add_argument("--no-frames", action="store_true",
                    help="skip image rendering (truth and observations only)")
    ps.set_defaults(fn=cmd_sim)

    pt = sub.add_parser("track", parents=[common],
                        help="track a frame folder or an observation file")
    pt.add_argument("--calib", required=True)
    src = pt.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="folder of .png/.pgm frames")
    src.add_argument("--obs", help="observations.csv from the simulator")
    pt.add_argument("--out", required=True)
    pt.set_defaults(fn=cmd_track)

    pe = sub.add_parser("eval", parents=[common],
                        help="score estimates against ground truth")
    pe.add_argument("--est-points", required=True)
    pe.add_argument("--gt-points", required=True)
    pe.add_argument("--est-poses")
    pe.add_argument("--gt-poses")
    pe.add_argument("--out")
    pe.set_defaults(fn=cmd_eval)

    pf = sub.add_parser("full", parents=[common],
                        help="simulate, track, and evaluate in one run")
    pf.add_argument("--out", required=True)
    pf.add_argument("--save-frames", action="store_true")
    pf.set_defaults(fn=cmd_full)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args, ["deftrack"] + argv)
    except (ConfigError, FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT
    except TrackingError as exc:
        print(f"tracking failed: {exc}", file=sys.stderr)
        return EXIT_TRACKING


if __name__ == "__main__":
    sys.exit(main())
