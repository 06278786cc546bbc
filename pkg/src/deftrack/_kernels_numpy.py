"""Pure-numpy twins of the numba kernels (_kernels_numba.py).

Same names, signatures, and numerics (up to float summation order);
selected by the DEFTRACK_DISABLE_NUMBA env flag via kernels.py.
"""

import numpy as np

_BOUND_EPS = 1e-3
_REST_Y_ITERS = 15
_BISECT_ITERS = 30


def _bilerp_grid(img, xs, ys):
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    return (v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy + v11 * fx * fy)


def bilinear_patch(img, cx, cy, half):
    """Sample a (2*half+1)^2 patch centered at subpixel (cx, cy)."""
    offs = np.arange(-half, half + 1, dtype=np.float64)
    ys, xs = np.meshgrid(cy + offs, cx + offs, indexing="ij")
    return _bilerp_grid(img, xs, ys)


def patch_in_bounds(width, height, cx, cy, half):
    return (cx - half >= 0.0 and cy - half >= 0.0
            and cx + half <= width - 1.0 - _BOUND_EPS
            and cy + half <= height - 1.0 - _BOUND_EPS)


def lk_refine(ref, img, gx, gy, cx, cy, alpha, beta, max_iter, tol, max_cond):
    """Joint Gauss-Newton over (dx, dy, alpha, beta) for one patch.

    Behavior mirrors the numba kernel; see its docstring for status codes.
    """
    half = (ref.shape[0] - 1) // 2
    height, width = img.shape
    offs = np.arange(-half, half + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ref_flat = ref.ravel()
    ones = np.ones(ref_flat.size)
    n_iter = 0
    for _ in range(max_iter):
        if not patch_in_bounds(width, height, cx, cy, half):
            return cx, cy, alpha, beta, 2, n_iter
        xs = cx + ox
        ys = cy + oy
        it = _bilerp_grid(img, xs, ys).ravel()
        ix = _bilerp_grid(gx, xs, ys).ravel()
        iy = _bilerp_grid(gy, xs, ys).ravel()
        r = ref_flat - alpha * it - beta
        J = np.stack([-alpha * ix, -alpha * iy, -it, -ones], axis=1)
        H = J.T @ J
        b = J.T @ r
        w = np.linalg.eigvalsh(H)
        if w[0] <= 0.0 or w[3] / w[0] > max_cond:
            return cx, cy, alpha, beta, 3, n_iter
        delta = np.linalg.solve(H, -b)
        cx += delta[0]
        cy += delta[1]
        alpha += delta[2]
        beta += delta[3]
        n_iter += 1
        if np.hypot(delta[0], delta[1]) < tol:
            if alpha <= 0.0:
                return cx, cy, alpha, beta, 4, n_iter
            return cx, cy, alpha, beta, 0, n_iter
    return cx, cy, alpha, beta, 1, n_iter


def _window_sum(a, half):
    """Sliding (2*half+1)^2 box sum via an integral image."""
    height, width = a.shape
    ii = np.zeros((height + 1, width + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    n = 2 * half + 1
    out = np.zeros_like(a)
    out[half:height - half, half:width - half] = (
        ii[n:, n:] - ii[:-n, n:] - ii[n:, :-n] + ii[:-n, :-n])
    return out


def shi_tomasi_response(img, window_half):
    """Min-eigenvalue response of the Sobel structure tensor."""
    height, width = img.shape
    gx = np.zeros((height, width))
    gy = np.zeros((height, width))
    sm_y = img[:-2, :] + 2.0 * img[1:-1, :] + img[2:, :]
    gx[1:-1, 1:-1] = sm_y[:, 2:] - sm_y[:, :-2]
    sm_x = img[:, :-2] + 2.0 * img[:, 1:-1] + img[:, 2:]
    gy[1:-1, 1:-1] = sm_x[2:, :] - sm_x[:-2, :]
    sxx = _window_sum(gx * gx, window_half)
    sxy = _window_sum(gx * gy, window_half)
    syy = _window_sum(gy * gy, window_half)
    tr = sxx + syy
    det_part = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy ** 2)
    resp = 0.5 * (tr - det_part)
    lo = 1 + window_half
    out = np.zeros_like(resp)
    out[lo:height - lo, lo:width - lo] = resp[lo:height - lo, lo:width - lo]
    return out


def _rest_y(py, px, pz, amp, phase_t, phase_scale):
    y0 = np.array(py, dtype=np.float64, copy=True)
    for _ in range(_REST_Y_ITERS):
        y0 = py - amp * np.sin(phase_t + phase_scale * (px + y0 + pz))
    return y0


def _march(dirs, origin, g_fn, step, max_dist, exit_fn=None):
    """Lockstep ray march; returns bracket (lo, hi) and a crossed mask."""
    n = dirs.shape[0]
    origin = np.asarray(origin, dtype=np.float64)
    s_prev = np.zeros(n)
    s_cur = np.full(n, step)
    lo = np.zeros(n)
    hi = np.zeros(n)
    crossed = np.zeros(n, dtype=bool)
    g0 = g_fn(origin[:1], origin[1:2], origin[2:3])[0]
    active = np.full(n, g0 > 0.0)
    while np.any(active):
        idx = np.nonzero(active)[0]
        s = s_cur[idx]
        px = origin[0] + s * dirs[idx, 0]
        py = origin[1] + s * dirs[idx, 1]
        pz = origin[2] + s * dirs[idx, 2]
        g = g_fn(px, py, pz)
        just_crossed = g <= 0.0
        ci = idx[just_crossed]
        lo[ci] = s_prev[ci]
        hi[ci] = s_cur[ci]
        crossed[ci] = True
        active[ci] = False
        rest_idx = idx[~just_crossed]
        if exit_fn is not None and rest_idx.size:
            gone = exit_fn(pz[~just_crossed], dirs[rest_idx, 2], step)
            active[rest_idx[gone]] = False
            rest_idx = rest_idx[~gone]
        s_prev[rest_idx] = s_cur[rest_idx]
        s_cur[rest_idx] += step
        over = rest_idx[s_cur[rest_idx] > max_dist]
        active[over] = False
    return lo, hi, crossed


def _bisect(dirs, origin, g_fn, lo, hi, mask):
    idx = np.nonzero(mask)[0]
    lo = lo[idx].copy()
    hi = hi[idx].copy()
    d = dirs[idx]
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        px = origin[0] + mid * d[:, 0]
        py = origin[1] + mid * d[:, 1]
        pz = origin[2] + mid * d[:, 2]
        inside = g_fn(px, py, pz) > 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return idx, 0.5 * (lo + hi)


def raycast_tube(dirs, origin, radius, length, amp, phase_t, phase_scale,
                 step, max_dist):
    """March rays from inside an open deformed tube (axis along z)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    n = dirs.shape[0]
    r2 = radius * radius

    def g_fn(px, py, pz):
        y0 = _rest_y(py, px, pz, amp, phase_t, phase_scale)
        return r2 - (px * px + y0 * y0)

    def exit_fn(pz, dz, step_):
        return ((pz > length + step_) & (dz > 0.0)) | ((pz < -step_) & (dz < 0.0))

    lo, hi, crossed = _march(dirs, origin, g_fn, step, max_dist, exit_fn)
    rest = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    if np.any(crossed):
        idx, s_hit = _bisect(dirs, origin, g_fn, lo, hi, crossed)
        px = origin[0] + s_hit * dirs[idx, 0]
        py = origin[1] + s_hit * dirs[idx, 1]
        pz = origin[2] + s_hit * dirs[idx, 2]
        ok = (pz >= 0.0) & (pz <= length)
        idx = idx[ok]
        y0 = _rest_y(py[ok], px[ok], pz[ok], amp, phase_t, phase_scale)
        rest[idx, 0] = px[ok]
        rest[idx, 1] = y0
        rest[idx, 2] = pz[ok]
        depth[idx] = s_hit[ok]
        hit[idx] = True
    return rest, depth, hit


def raycast_plane(dirs, origin, plane_y, half_x, half_z, amp, phase_t,
                  phase_scale, step, max_dist):
    """March rays onto a deformed height field y = plane_y + A sin(...)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    n = dirs.shape[0]

    def g_fn(px, py, pz):
        return (plane_y + amp * np.sin(phase_t + phase_scale * (px + plane_y + pz))) - py

    lo, hi, crossed = _march(dirs, origin, g_fn, step, max_dist, None)
    rest = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    if np.any(crossed):
        idx, s_hit = _bisect(dirs, origin, g_fn, lo, hi, crossed)
        px = origin[0] + s_hit * dirs[idx, 0]
        pz = origin[2] + s_hit * dirs[idx, 2]
        ok = (px >= -half_x) & (px <= half_x) & (pz >= -half_z) & (pz <= half_z)
        idx = idx[ok]
        rest[idx, 0] = px[ok]
        rest[idx, 1] = plane_y
        rest[idx, 2] = pz[ok]
        depth[idx] = s_hit[ok]
        hit[idx] = True
    return rest, depth, hit


def texture_eval(points, tex_dirs, tex_freqs, tex_phases, tex_amps, base, scale):
    """Band-limited sinusoid-mixture texture over rest coordinates."""
    proj = points @ tex_dirs.T                      # (n, m)
    return base + scale * (np.sin(proj * tex_freqs + tex_phases) @ tex_amps)
