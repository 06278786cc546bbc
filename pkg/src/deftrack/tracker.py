"""Photometric patch tracking with per-feature gain and bias.

Each feature stores an intensity template per pyramid level, sampled at
the frame where it was last refreshed. Tracking minimizes

    sum_v (template(v) - alpha * I_t(v + d) - beta)^2

jointly over the displacement d and the photometric pair (alpha, beta),
coarse to fine, warm-started from the previous frame's position. A
structural-similarity gate over the finest-level patch rejects drifted
tracks, and templates are re-sampled every refresh_period frames (alpha
and beta reset to 1 and 0: the new template is the current image).

Failures (out of bounds, iteration cap, conditioning, non-positive
gain, SSIM below threshold) mark the feature lost; lost features are
never revived.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .config import TrackerConfig
from .image import Pyramid

STATUS_ACTIVE = "active"
STATUS_LOST = "lost"

_FAIL_REASON = {
    kernels.LK_MAX_ITER: "no_convergence",
    kernels.LK_OUT_OF_BOUNDS: "out_of_bounds",
    kernels.LK_ILL_CONDITIONED: "ill_conditioned",
    kernels.LK_BAD_GAIN: "bad_gain",
}


def ssim(patch_x: np.ndarray, patch_y: np.ndarray,
         c1: float, c2: float) -> float:
    """Structural similarity of two equally-sized patches.

    Population moments; identical patches give exactly 1.0.
    """
    x = np.asarray(patch_x, dtype=np.float64).ravel()
    y = np.asarray(patch_y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size == 0:
        raise ValueError("patches must match in size and be non-empty")
    mx = x.mean()
    my = y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cxy = np.mean((x - mx) * (y - my))
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


@dataclass
class TrackedFeature:
    """One tracked point: template stack, current state, diagnostics."""

    feature_id: int
    ref_px: np.ndarray               # position where templates were sampled
    px: np.ndarray                   # current position, finest-level pixels
    templates: list[Optional[np.ndarray]]  # per level, None if out of bounds there
    alpha: float = 1.0
    beta: float = 0.0
    status: str = STATUS_ACTIVE
    frames_since_refresh: int = 0
    last_ssim: float = 1.0
    fail_reason: str = ""
    age: int = 0


class TrackSession:
    """Tracks one feature set through a frame sequence."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        if self.cfg.patch_size % 2 != 1 or self.cfg.patch_size < 3:
            raise ValueError("patch_size must be odd and >= 3")
        self.features: list[TrackedFeature] = []
        self._half = (self.cfg.patch_size - 1) // 2
        L = self.cfg.ssim_dynamic_range
        self._c1 = (self.cfg.ssim_k1 * L) ** 2
        self._c2 = (self.cfg.ssim_k2 * L) ** 2

    # ------------------------------------------------------------------ setup
    def start(self, pyramid: Pyramid, positions: np.ndarray,
              ids: Optional[np.ndarray] = None) -> None:
        """Begin tracking at the given finest-level positions."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if ids is None:
            ids = np.arange(len(positions))
        self.features = []
        for fid, pos in zip(ids, positions):
            templates = self._sample_templates(pyramid, pos)
            if templates[0] is None:
                continue  # unusable at the finest level: never track it
            self.features.append(TrackedFeature(
                feature_id=int(fid),
                ref_px=pos.copy(),
                px=pos.copy(),
                templates=templates,
            ))

    def _sample_templates(self, pyramid: Pyramid, pos: np.ndarray):
        out: list[Optional[np.ndarray]] = []
        for lv in range(pyramid.n_levels):
            img = pyramid.levels[lv]
            scale = 1.0 / (1 << lv)
            cx, cy = pos[0] * scale, pos[1] * scale
            h, w = img.shape
            if kernels.patch_in_bounds(w, h, cx, cy, self._half):
                out.append(np.asarray(kernels.bilinear_patch(img, cx, cy, self._half)))
            else:
                out.append(None)
        return out

    # --------------------------------------------------------------- tracking
    def track(self, pyramid: Pyramid) -> None:
        """Advance all active features into the given frame."""
        cfg = self.cfg
        for feat in self.features:
            if feat.status != STATUS_ACTIVE:
                continue
            cx, cy = float(feat.px[0]), float(feat.px[1])
            alpha, beta = feat.alpha, feat.beta
            status = kernels.LK_OUT_OF_BOUNDS  # if every level is skipped
            for lv in range(pyramid.n_levels - 1, -1, -1):
                if feat.templates[lv] is None:
                    continue
                img = pyramid.levels[lv]
                scale = 1.0 / (1 << lv)
                h, w = img.shape
                if not kernels.patch_in_bounds(w, h, cx * scale, cy * scale, self._half):
                    if lv == 0:
                        status = kernels.LK_OUT_OF_BOUNDS
                    continue
                rx, ry, alpha_new, beta_new, status, _ = kernels.lk_refine(
                    feat.templates[lv], img,
                    pyramid.grads_x[lv], pyramid.grads_y[lv],
                    cx * scale, cy * scale, alpha, beta,
                    cfg.max_iterations, cfg.step_tol, cfg.max_condition)
                if lv > 0:
                    # coarse failures are soft: keep the estimate, go finer
                    if status in (kernels.LK_CONVERGED, kernels.LK_MAX_ITER):
                        cx, cy = rx / scale, ry / scale
                        alpha, beta = alpha_new, beta_new
                else:
                    cx, cy = rx, ry
                    alpha, beta = alpha_new, beta_new
            feat.age += 1
            if status != kernels.LK_CONVERGED:
                feat.status = STATUS_LOST
                feat.fail_reason = _FAIL_REASON.get(status, "unknown")
                continue
            feat.px = np.array([cx, cy])
            feat.alpha = alpha
            feat.beta = beta
            # structural gate on the finest level
            img0 = pyramid.levels[0]
            h0, w0 = img0.shape
            if not kernels.patch_in_bounds(w0, h0, cx, cy, self._half):
                feat.status = STATUS_LOST
                feat.fail_reason = "out_of_bounds"
                continue
            cur = np.asarray(kernels.bilinear_patch(img0, cx, cy, self._half))
            feat.last_ssim = ssim(feat.templates[0], cur, self._c1, self._c2)
            if feat.last_ssim < cfg.ssim_threshold:
                feat.status = STATUS_LOST
                feat.fail_reason = "ssim"
                continue
            feat.frames_since_refresh += 1
            if feat.frames_since_refresh >= cfg.refresh_period:
                self.refresh(feat, pyramid)

    def refresh(self, feat: TrackedFeature, pyramid: Pyramid) -> None:
        """Re-sample templates at the current position; reset photometrics."""
        templates = self._sample_templates(pyramid, feat.px)
        if templates[0] is None:
            feat.status = STATUS_LOST
            feat.fail_reason = "out_of_bounds"
            return
        feat.templates = templates
        feat.ref_px = feat.px.copy()
        feat.alpha = 1.0
        feat.beta = 0.0
        feat.frames_since_refresh = 0

    # ---------------------------------------------------------------- queries
    def active_features(self) -> list[TrackedFeature]:
        return [f for f in self.features if f.status == STATUS_ACTIVE]

    def observations(self):
        """(ids, positions) of currently active features."""
        act = self.active_features()
        ids = np.array([f.feature_id for f in act], dtype=np.int64)
        px = (np.array([f.px for f in act], dtype=np.float64).reshape(-1, 2))
        return ids, px

    def track_rows(self, frame_index: int):
        """Per-feature CSV rows: frame, id, x, y, alpha, beta, ssim, status."""
        rows = []
        for f in self.features:
            rows.append((frame_index, f.feature_id, f.px[0], f.px[1],
                         f.alpha, f.beta, f.last_ssim,
                         f.status if not f.fail_reason else f"lost:{f.fail_reason}"))
        return rows
