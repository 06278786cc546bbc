"""Configuration dataclasses and the plain-text key=value config format.

Config files are line-oriented text:

    # comment
    tracker.patch_size = 11
    sim.amp = 5.0
    sim.trajectory = insertion

Keys are dotted: the prefix selects a section, the remainder a field of
that section's dataclass. Values are parsed by the declared field type
(int, float, bool, str, or a whitespace-separated float list). Unknown
keys raise ConfigError so typos never pass silently. Command-line
overrides reuse the same ``key=value`` grammar and win over file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional


class ConfigError(ValueError):
    """Raised for unparseable config text or unknown/invalid keys."""


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into an ordered dict of strings.

    Blank lines and ``#`` comments are skipped. A bare ``key value``
    (no equals sign, single split on whitespace) is accepted too so
    calibration files stay terse.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = parts
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(name: str, typ, raw: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            return _parse_bool(raw)
        if typ is str:
            return raw
        if typ == tuple[float, ...]:
            return tuple(float(tok) for tok in raw.split())
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"key {name!r}: unsupported field type {typ}")


@dataclass
class DetectorConfig:
    """Shi-Tomasi corner detection over a spatial grid."""

    grid_rows: int = 10
    grid_cols: int = 10
    target_points: int = 300
    min_distance: float = 8.0
    rel_threshold: float = 1e-3  # keep scores >= rel_threshold * max score
    window_half: int = 3         # 7x7 structure-tensor window
    margin: int = 8              # detections keep this many px off the border


@dataclass
class TrackerConfig:
    """Photometric patch tracking with per-feature gain and bias."""

    patch_size: int = 11
    levels: int = 4
    max_iterations: int = 30     # per pyramid level
    step_tol: float = 0.01       # converged when |displacement update| < tol px
    max_condition: float = 1e8   # normal-equations conditioning bail-out
    refresh_period: int = 5      # frames between template refreshes
    ssim_threshold: float = 0.8
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    ssim_dynamic_range: float = 255.0


@dataclass
class InitConfig:
    """Two-frame map bootstrap."""

    gap: int = 3                 # partner frame index relative to the reference
    ransac_iterations: int = 200
    inlier_pixels: float = 1.0   # epipolar threshold, converted to an angle at fx
    early_exit_fraction: float = 0.7
    min_inliers: int = 8
    min_parallax_deg: float = 0.5
    map_scale: float = 1.0       # applied after init (translation norm starts at 1)
    # a candidate pair is accepted only if the triangulated map keeps at
    # least this many points and this fraction of the shared tracks;
    # otherwise the pipeline slides to the next partner frame
    min_map_points: int = 30
    min_map_fraction: float = 0.5


@dataclass
class SolverConfig:
    """Levenberg-Marquardt settings."""

    max_iterations: int = 30
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e10
    tol_cost: float = 1e-8       # relative cost decrease
    tol_grad: float = 1e-10      # gradient infinity norm
    max_rejects: int = 12


@dataclass
class DeformConfig:
    """Joint pose + per-point deformation tracking."""

    knn: int = 20
    nn_sigma: float = 15.0       # graph weight length scale, scene units
    sigma_rep: float = 1.0       # reprojection noise, px
    sigma_spa: float = 10.0      # spatial regularizer scale, scene milli-units
    sigma_tmp: float = 10.0      # temporal regularizer scale, scene milli-units
    lambda_spa: float = 1.0
    lambda_tmp: float = 1.0
    min_rigid_obs: int = 6       # below this the rigid seed stage is skipped
    lost_gate_px: float = 3.0    # post-fit reprojection gate
    min_track_obs: int = 6       # below this the frame counts as tracking failure


@dataclass
class SimConfig:
    """Synthetic deforming scene."""

    geometry: str = "tube"       # tube | plane
    radius: float = 25.0
    length: float = 200.0
    n_theta: int = 32            # tube vertex grid
    n_axis: int = 80
    plane_y: float = 30.0        # plane scenes: surface height
    half_x: float = 80.0
    half_z: float = 80.0
    grid_x: int = 40             # plane vertex grid
    grid_z: int = 40
    amp: float = 0.0             # deformation amplitude A
    omega: float = 0.0           # deformation angular velocity, rad/s
    phase_scale: float = 0.04    # rest-coordinate phase factor (1/25 per unit)
    fps: float = 10.0
    n_frames: int = 100
    trajectory: str = "insertion"  # insertion | scan
    speed: float = 2.5           # units per second along the main axis
    wiggle_amp: float = 4.0      # lateral circular wiggle radius
    wiggle_period: float = 2.5   # seconds per wiggle revolution
    start_z: float = 5.0
    lookahead: float = 60.0      # camera aims at an axis point this far ahead
    scan_height: float = -40.0   # plane scenes: camera y
    width: int = 640
    height: int = 480
    fx: float = 420.0
    fy: float = 420.0
    texture_octaves: int = 4
    texture_base_freq: float = 0.02
    texture_contrast: float = 80.0
    texture_components: int = 4  # sinusoids per octave
    gain_low: float = 1.0
    gain_high: float = 1.0
    bias_low: float = 0.0
    bias_high: float = 0.0
    pixel_noise: float = 0.0     # additive Gaussian, intensity units
    obs_noise_px: float = 0.0    # track observation noise
    target_points: int = 300
    obs_margin_px: float = 12.0
    max_obs_distance: float = 80.0
    min_obs_depth: float = 2.0
    seed: int = 0
    image_format: str = "png"    # png | pgm


@dataclass
class RunConfig:
    """Everything a pipeline run needs, grouped by stage."""

    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    init: InitConfig = field(default_factory=InitConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    seed: int = 0
    source: str = "observations"  # full mode tracking source: observations | rendered

    _SECTIONS = ("detector", "tracker", "init", "solver", "deform", "sim")

    def apply_overrides(self, flat: dict[str, str]) -> None:
        """Apply dotted ``section.key -> raw string`` pairs in place."""
        for key, raw in flat.items():
            if key == "seed":
                self.seed = _coerce(key, int, raw)
                continue
            if key == "source":
                if raw not in ("observations", "rendered"):
                    raise ConfigError(f"source must be observations|rendered, got {raw!r}")
                self.source = raw
                continue
            section, _, attr = key.partition(".")
            if section not in self._SECTIONS or not attr:
                raise ConfigError(f"unknown config key {key!r}")
            sub = getattr(self, section)
            if (type(sub), attr) not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(sub, attr, _coerce(key, _FIELD_TYPES[(type(sub), attr)], raw))

    def flatten(self) -> dict[str, str]:
        """Dump as sorted dotted key -> string pairs (manifest format)."""
        out: dict[str, str] = {"seed": str(self.seed), "source": self.source}
        for section in self._SECTIONS:
            sub = getattr(self, section)
            for f in fields(sub):
                val = getattr(sub, f.name)
                if isinstance(val, tuple):
                    sval = " ".join(repr(v) for v in val)
                else:
                    sval = repr(val) if isinstance(val, float) else str(val)
                out[f"{section}.{f.name}"] = sval
        return dict(sorted(out.items()))


# Field name -> declared python type, resolved once (dataclass .type is a
# string under 'from __future__ import annotations').
_FIELD_TYPES: dict[tuple[type, str], type] = {}
for _cls in (DetectorConfig, TrackerConfig, InitConfig, SolverConfig,
             DeformConfig, SimConfig):
    _hints = {
        "int": int, "float": float, "bool": bool, "str": str,
        "tuple[float, ...]": tuple[float, ...],
    }
    for _f in fields(_cls):
        _FIELD_TYPES[(_cls, _f.name)] = _hints[_f.type]


def load_run_config(path: Optional[str], overrides: Optional[dict[str, str]] = None) -> RunConfig:
    """Build a RunConfig from an optional file plus override pairs."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg.apply_overrides(parse_kv_text(fh.read()))
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Render a RunConfig back to its file format (sorted, reloadable)."""
    lines = [f"{k} = {v}" for k, v in cfg.flatten().items()]
    return "\n".join(lines) + "\n"
