"""Image containers, pyramid construction, corner detection, file I/O.

Intensities are float64 in a nominal [0, 255] range. Synthetic renders
keep values unclipped so photometric relations stay exact in memory;
clipping happens only when writing 8-bit files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import DetectorConfig

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class ImageBuffer:
    """A grayscale frame: row-major float64 intensities plus timing."""

    data: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("ImageBuffer wants a 2-d array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image intensities must be finite")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Pyramid:
    """Coarse-to-fine image stack with per-level central-difference gradients."""

    levels: list[np.ndarray]
    grads_x: list[np.ndarray] = field(default_factory=list)
    grads_y: list[np.ndarray] = field(default_factory=list)
    frame_index: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _downsample(img: np.ndarray) -> np.ndarray:
    """5-tap binomial prefilter then decimation by 2 (even rows/cols)."""
    pad = np.pad(img, 2, mode="edge")
    tmp = np.zeros_like(pad)
    for k, w in enumerate(_BINOMIAL):
        tmp[:, 2:-2] += w * pad[:, k:pad.shape[1] - 4 + k]
    out = np.zeros_like(pad)
    for k, w in enumerate(_BINOMIAL):
        out[2:-2, :] += w * tmp[k:pad.shape[0] - 4 + k, :]
    return out[2:-2:2, 2:-2:2].copy()


def build_pyramid(image: ImageBuffer, levels: int, patch_size: int = 11) -> Pyramid:
    """Build ``levels`` octaves; the coarsest must still fit a patch."""
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    data = image.data
    stack = [data]
    for _ in range(levels - 1):
        data = _downsample(data)
        stack.append(data)
    if min(stack[-1].shape) < patch_size:
        raise ValueError(
            f"image {image.data.shape} too small for {levels} levels with "
            f"patch size {patch_size}")
    gxs, gys = [], []
    for lv in stack:
        gy, gx = np.gradient(lv)
        gxs.append(np.ascontiguousarray(gx))
        gys.append(np.ascontiguousarray(gy))
    return Pyramid(levels=stack, grads_x=gxs, grads_y=gys,
                   frame_index=image.frame_index)


def detect_features(image: ImageBuffer, cfg: DetectorConfig | None = None):
    """Shi-Tomasi corners spread over a grid.

    Returns (positions (N, 2) float64, scores (N,)). Selection is
    deterministic: per-cell ranking by (score desc, y, x), a global
    min-distance pass in that same order, then truncation to the target.
    """
    cfg = cfg or DetectorConfig()
    resp = kernels.shi_tomasi_response(image.data, cfg.window_half)
    h, w = resp.shape
    m = int(np.ceil(cfg.margin))
    if m > 0:
        resp = resp.copy()
        resp[:m, :] = 0.0
        resp[-m:, :] = 0.0
        resp[:, :m] = 0.0
        resp[:, -m:] = 0.0
    max_score = float(resp.max())
    if max_score <= 0.0:
        return np.zeros((0, 2)), np.zeros(0)
    threshold = cfg.rel_threshold * max_score

    # 3x3 local maxima above the adaptive threshold
    peak = np.ones_like(resp, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            shifted = np.roll(np.roll(resp, dy, axis=0), dx, axis=1)
            peak &= resp >= shifted
    ys, xs = np.nonzero(peak & (resp >= threshold))
    scores = resp[ys, xs]

    cell_h = h / cfg.grid_rows
    cell_w = w / cfg.grid_cols
    cell = (np.minimum((ys / cell_h).astype(int), cfg.grid_rows - 1) * cfg.grid_cols
            + np.minimum((xs / cell_w).astype(int), cfg.grid_cols - 1))
    per_cell_cap = max(1, int(np.ceil(cfg.target_points / (cfg.grid_rows * cfg.grid_cols))))

    order = np.lexsort((xs, ys, -scores))  # score desc, then y, then x
    kept_xy: list[tuple[float, float]] = []
    kept_scores: list[float] = []
    cell_counts = np.zeros(cfg.grid_rows * cfg.grid_cols, dtype=int)
    min_d2 = cfg.min_distance * cfg.min_distance
    occupied: dict[tuple[int, int], list[int]] = {}
    bucket = max(cfg.min_distance, 1.0)
    for idx in order:
        c = cell[idx]
        if cell_counts[c] >= per_cell_cap:
            continue
        x, y = float(xs[idx]), float(ys[idx])
        bx, by = int(x // bucket), int(y // bucket)
        clash = False
        for nb in ((bx + i, by + j) for i in (-1, 0, 1) for j in (-1, 0, 1)):
            for k in occupied.get(nb, ()):
                px, py = kept_xy[k]
                if (px - x) ** 2 + (py - y) ** 2 < min_d2:
                    clash = True
                    break
            if clash:
                break
        if clash:
            continue
        occupied.setdefault((bx, by), []).append(len(kept_xy))
        kept_xy.append((x, y))
        kept_scores.append(float(scores[idx]))
        cell_counts[c] += 1
        if len(kept_xy) >= cfg.target_points:
            break
    pos = np.array(kept_xy, dtype=np.float64).reshape(-1, 2)
    return pos, np.array(kept_scores)


# ------------------------------------------------------------------- file I/O

_LUMA = np.array([0.299, 0.587, 0.114])


def load_image(path, frame_index: int = 0, timestamp: float = 0.0) -> ImageBuffer:
    """Read a PGM (P2/P5) or PNG file; color inputs use the 601 luminance."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        data = _read_pgm(path)
    elif path.lower().endswith(".png"):
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., :3] @ _LUMA
        data = arr
    else:
        raise ValueError(f"unsupported image format: {path}")
    return ImageBuffer(data=data, frame_index=frame_index, timestamp=timestamp)


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] not in (10, 13):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        tokens.append(raw[i:j])
        i = j
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        i += 1  # single whitespace after maxval
        dtype = np.uint8 if maxval < 256 else ">u2"
        data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=i)
        return data.reshape(h, w).astype(np.float64)
    if magic == b"P2":
        vals = raw[i:].split()
        return np.array(vals[:w * h], dtype=np.float64).reshape(h, w)
    raise ValueError(f"not a PGM file: {path}")


def save_pgm(path, image: ImageBuffer) -> None:
    data = np.clip(np.rint(image.data), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_png(path, image: ImageBuffer) -> None:
    from PIL import Image
    data = np.clip(np.rint(image.data), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_image_folder(folder):
    """Yield ImageBuffers for every .pgm/.png in ``folder``, filename order."""
    import os
    names = sorted(n for n in os.listdir(folder)
                   if n.lower().endswith((".pgm", ".png")))
    if not names:
        raise ValueError(f"no .pgm or .png files in {folder}")
    for k, name in enumerate(names):
        yield load_image(os.path.join(folder, name), frame_index=k, timestamp=float(k))
