"""Synthetic deforming scenes with ground truth.

Geometry is a tube (axis along +z, camera inside, insertion-style
trajectories) or a plane height field scanned from above. Surfaces
deform by a traveling sine on the rest coordinates:

    y(t) = y_rest + A * sin(omega * t + phase_scale * (x_r + y_r + z_r))

Only the y component moves. ``phase_scale`` converts rest units into
phase; at the default 0.04 the spatial wavelength is about 90 units, so
neighboring surface points move coherently.

Rendering ray-marches each pixel to the deformed surface, reads a
seed-fixed band-limited texture attached to the rest coordinates
(octaves of random-direction sinusoids), applies the frame's gain/bias
pair, and finally adds Gaussian pixel noise. Intensities stay unclipped
in memory so the photometric relation is exact before the noise term;
8-bit clipping happens at file export.

Observations are exact vertex projections plus optional pixel noise:
the tracked set is chosen at frame 0 (visible, inside margins, within
the distance cull, thinned evenly to the target count) and shrinks
monotonically, mirroring a tracker that never re-acquires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import SimConfig
from .geometry import CameraModel, Pose
from .image import ImageBuffer

_MARCH_STEP = 1.0
_MARCH_MAX_FACTOR = 6.0  # max ray length as a multiple of tube length


def deform_vertices(rest: np.ndarray, amp: float, omega: float, t: float,
                    phase_scale: float = 1.0) -> np.ndarray:
    """Displace rest vertices: y += A * sin(omega t + phase_scale * sum(rest))."""
    rest = np.atleast_2d(np.asarray(rest, dtype=np.float64))
    out = rest.copy()
    phase = omega * t + phase_scale * rest.sum(axis=1)
    out[:, 1] += amp * np.sin(phase)
    return out


def _look_at(position: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose: +z toward target, +x right, +y image-down."""
    f = target - position
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(f, up)) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    r = np.cross(up, f)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R_wc = np.stack([r, d, f], axis=1)
    return Pose(R_wc, position)


@dataclass
class Scene:
    """A configured scene: rest vertices, camera, trajectory, texture."""

    cfg: SimConfig
    camera: CameraModel
    rest: np.ndarray                 # (V, 3) rest vertex positions
    ids: np.ndarray                  # (V,) vertex ids
    tex_dirs: np.ndarray
    tex_freqs: np.ndarray
    tex_phases: np.ndarray
    tex_amps: np.ndarray
    gains: np.ndarray                # per-frame photometric gain
    biases: np.ndarray               # per-frame photometric bias
    tex_base: float = 127.5

    @property
    def n_frames(self) -> int:
        return self.cfg.n_frames

    def frame_time(self, frame: int) -> float:
        return frame / self.cfg.fps

    # ------------------------------------------------------------------ truth
    def vertices_at(self, frame: int) -> np.ndarray:
        return deform_vertices(self.rest, self.cfg.amp, self.cfg.omega,
                               self.frame_time(frame), self.cfg.phase_scale)

    def camera_to_world(self, frame: int) -> Pose:
        c = self.cfg
        t = self.frame_time(frame)
        if c.trajectory == "insertion":
            ang = 2.0 * np.pi * t / c.wiggle_period if c.wiggle_period > 0 else 0.0
            pos = np.array([c.wiggle_amp * np.cos(ang),
                            c.wiggle_amp * np.sin(ang),
                            c.start_z + c.speed * t])
            target = np.array([0.0, 0.0, pos[2] + c.lookahead])
        elif c.trajectory == "scan":
            pos = np.array([-c.half_x * 0.5 + c.speed * t, c.scan_height,
                            -c.half_z * 0.25])
            target = np.array([pos[0] + 0.15 * c.lookahead, c.plane_y,
                               pos[2] + c.lookahead * 0.35])
        else:
            raise ValueError(f"unknown trajectory {c.trajectory!r}")
        return _look_at(pos, target)

    def world_to_camera(self, frame: int) -> Pose:
        return self.camera_to_world(frame).inverse()

    # -------------------------------------------------------------- rendering
    def raycast(self, frame: int, pixels: np.ndarray):
        """Cast pixel rays at a frame.

        Returns (rest coordinates (N, 3), ray depth (N,), hit mask (N,)).
        Rest coordinates identify surface material points: their position
        at any other frame comes from deform_vertices.
        """
        c = self.cfg
        T_wc = self.camera_to_world(frame)
        rays_cam = self.camera.unproject(np.asarray(pixels, dtype=np.float64))
        dirs = np.atleast_2d(rays_cam) @ T_wc.R.T
        phase_t = c.omega * self.frame_time(frame)
        max_dist = _MARCH_MAX_FACTOR * max(c.length, 2 * c.half_z, 50.0)
        if c.geometry == "tube":
            rest, depth, hit = kernels.raycast_tube(
                np.ascontiguousarray(dirs), T_wc.t.copy(), c.radius, c.length,
                c.amp, phase_t, c.phase_scale, _MARCH_STEP, max_dist)
        else:
            rest, depth, hit = kernels.raycast_plane(
                np.ascontiguousarray(dirs), T_wc.t.copy(), c.plane_y,
                c.half_x, c.half_z, c.amp, phase_t, c.phase_scale,
                _MARCH_STEP, max_dist)
        return rest, depth, np.asarray(hit, dtype=bool)

    def texture(self, rest_points: np.ndarray) -> np.ndarray:
        return kernels.texture_eval(
            np.ascontiguousarray(np.atleast_2d(rest_points)),
            self.tex_dirs, self.tex_freqs, self.tex_phases, self.tex_amps,
            self.tex_base, 1.0)

    def render_frame(self, frame: int,
                     rng: np.random.Generator | None = None) -> ImageBuffer:
        """Ray-cast the frame; background (no hit) renders as 0."""
        c = self.cfg
        us, vs = np.meshgrid(np.arange(c.width, dtype=np.float64),
                             np.arange(c.height, dtype=np.float64))
        pixels = np.stack([us.ravel(), vs.ravel()], axis=1)
        rest, _, hit = self.raycast(frame, pixels)
        inten = np.zeros(pixels.shape[0])
        if np.any(hit):
            inten[hit] = self.texture(rest[hit])
        inten = self.gains[frame] * inten + self.biases[frame]
        img = inten.reshape(c.height, c.width)
        if c.pixel_noise > 0:
            if rng is None:
                rng = np.random.default_rng(
                    np.random.SeedSequence([c.seed, 977, frame]))
            img = img + rng.normal(0.0, c.pixel_noise, size=img.shape)
        return ImageBuffer(data=img, frame_index=frame,
                           timestamp=self.frame_time(frame))

    # ----------------------------------------------------------- observations
    def visible_mask(self, frame: int, ids: np.ndarray | None = None):
        """Vertices currently usable as observations (depth, margin, range)."""
        c = self.cfg
        sel = slice(None) if ids is None else np.searchsorted(self.ids, ids)
        pts_w = self.vertices_at(frame)[sel]
        pts_c = self.world_to_camera(frame).apply(pts_w)
        pix, valid = self.camera.project(pts_c)
        depth = pts_c[:, 2]
        dist = np.linalg.norm(pts_c, axis=1)
        ok = (valid & (depth > c.min_obs_depth) & (dist < c.max_obs_distance)
              & self.camera.contains(pix, margin=c.obs_margin_px))
        return ok, pix

    def project_ids(self, frame: int, ids: np.ndarray):
        """Exact projections of the given vertex ids (no noise, no culls)."""
        sel = np.searchsorted(self.ids, ids)
        pts_c = self.world_to_camera(frame).apply(self.vertices_at(frame)[sel])
        pix, _ = self.camera.project(pts_c)
        return pix


@dataclass
class ObservationSet:
    """One frame of id-tagged pixel observations."""

    frame: int
    ids: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_scene(cfg: SimConfig) -> Scene:
    """Construct vertices, camera, texture, and photometric draws from a config."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 141]))
    if cfg.geometry == "tube":
        thetas = np.linspace(0.0, 2.0 * np.pi, cfg.n_theta, endpoint=False)
        zs = np.linspace(0.0, cfg.length, cfg.n_axis)
        tt, zz = np.meshgrid(thetas, zs)
        rest = np.stack([
            cfg.radius * np.cos(tt.ravel()),
            cfg.radius * np.sin(tt.ravel()),
            zz.ravel(),
        ], axis=1)
    elif cfg.geometry == "plane":
        xs = np.linspace(-cfg.half_x, cfg.half_x, cfg.grid_x)
        zs = np.linspace(-cfg.half_z, cfg.half_z, cfg.grid_z)
        xx, zz = np.meshgrid(xs, zs)
        rest = np.stack([
            xx.ravel(),
            np.full(xx.size, cfg.plane_y),
            zz.ravel(),
        ], axis=1)
    else:
        raise ValueError(f"unknown geometry {cfg.geometry!r}")
    camera = CameraModel("pinhole", cfg.width, cfg.height,
                         cfg.fx, cfg.fy, cfg.width / 2.0 - 0.5,
                         cfg.height / 2.0 - 0.5)
    n_total = cfg.texture_octaves * cfg.texture_components
    dirs = rng.normal(size=(n_total, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    octave = np.repeat(np.arange(cfg.texture_octaves), cfg.texture_components)
    freqs = 2.0 * np.pi * cfg.texture_base_freq * (2.0 ** octave)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_total)
    amps = (0.5 ** octave)
    amps = amps / np.sum(amps) * (cfg.texture_contrast / 127.5) * 127.5
    gains = rng.uniform(cfg.gain_low, cfg.gain_high, size=cfg.n_frames)
    biases = rng.uniform(cfg.bias_low, cfg.bias_high, size=cfg.n_frames)
    return Scene(cfg=cfg, camera=camera, rest=rest,
                 ids=np.arange(rest.shape[0], dtype=np.int64),
                 tex_dirs=dirs, tex_freqs=freqs, tex_phases=phases,
                 tex_amps=amps, gains=gains, biases=biases)


def emit_observations(scene: Scene,
                      frames: range | None = None) -> list[ObservationSet]:
    """Ideal tracks: per-frame noisy projections of a monotone tracked set.

    The tracked ids are the frame-0 visible vertices thinned evenly to
    the configured target count; each later frame keeps the subset still
    visible (vertices that leave are dropped for good). Noise and the
    selection are driven by the scene seed only.
    """
    cfg = scene.cfg
    frames = frames if frames is not None else range(cfg.n_frames)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 523]))
    ok0, _ = scene.visible_mask(frames[0] if len(frames) else 0)
    tracked = scene.ids[ok0]
    if len(tracked) > cfg.target_points:
        sel = np.linspace(0, len(tracked) - 1, cfg.target_points).round().astype(int)
        tracked = tracked[np.unique(sel)]
    out = []
    for f in frames:
        if len(tracked) == 0:
            out.append(ObservationSet(frame=f, ids=tracked.copy(),
                                      pixels=np.zeros((0, 2))))
            continue
        ok, pix = scene.visible_mask(f, tracked)
        tracked = tracked[ok]
        pix = pix[ok]
        if cfg.obs_noise_px > 0:
            pix = pix + rng.normal(0.0, cfg.obs_noise_px, size=pix.shape)
        out.append(ObservationSet(frame=f, ids=tracked.copy(), pixels=pix))
    return out


def truth_rows(scene: Scene, ids: np.ndarray, frames=None):
    """(frame, id, x, y, z) rows of ground-truth positions for given ids."""
    frames = frames if frames is not None else range(scene.cfg.n_frames)
    sel = np.searchsorted(scene.ids, ids)
    rows = []
    for f in frames:
        pts = scene.vertices_at(f)[sel]
        for i, pid in enumerate(ids):
            rows.append((f, int(pid), pts[i, 0], pts[i, 1], pts[i, 2]))
    return rows
