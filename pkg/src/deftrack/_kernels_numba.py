"""Numba implementations of the hot inner loops.

Every function here has a vectorized twin in _kernels_numpy.py with the
same name, signature, and numeric behavior (up to float summation
order). Dispatch lives in kernels.py.

Status codes returned by lk_refine:
    0 converged, 1 iteration cap, 2 out of bounds,
    3 ill-conditioned normal equations, 4 non-positive gain.
"""

import numpy as np
import numba as nb

_BOUND_EPS = 1e-3
_REST_Y_ITERS = 15
_BISECT_ITERS = 30


@nb.njit(cache=True, inline="always")
def _bilerp(img, x, y):
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    return (v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy + v11 * fx * fy)


@nb.njit(cache=True)
def bilinear_patch(img, cx, cy, half):
    """Sample a (2*half+1)^2 patch centered at subpixel (cx, cy)."""
    n = 2 * half + 1
    out = np.empty((n, n))
    for j in range(n):
        y = cy + (j - half)
        for i in range(n):
            x = cx + (i - half)
            out[j, i] = _bilerp(img, x, y)
    return out


@nb.njit(cache=True)
def patch_in_bounds(width, height, cx, cy, half):
    return (cx - half >= 0.0 and cy - half >= 0.0
            and cx + half <= width - 1.0 - _BOUND_EPS
            and cy + half <= height - 1.0 - _BOUND_EPS)


@nb.njit(cache=True)
def lk_refine(ref, img, gx, gy, cx, cy, alpha, beta, max_iter, tol, max_cond):
    """Joint Gauss-Newton over (dx, dy, alpha, beta) for one patch.

    Minimizes sum_v (ref(v) - alpha * img(v + d) - beta)^2 starting from
    center (cx, cy). Returns (cx, cy, alpha, beta, status, iterations).
    """
    half = (ref.shape[0] - 1) // 2
    height, width = img.shape
    n_iter = 0
    for _ in range(max_iter):
        if not patch_in_bounds(width, height, cx, cy, half):
            return cx, cy, alpha, beta, 2, n_iter
        H = np.zeros((4, 4))
        b = np.zeros(4)
        for j in range(ref.shape[0]):
            y = cy + (j - half)
            for i in range(ref.shape[0]):
                x = cx + (i - half)
                it = _bilerp(img, x, y)
                ix = _bilerp(gx, x, y)
                iy = _bilerp(gy, x, y)
                r = ref[j, i] - alpha * it - beta
                j0 = -alpha * ix
                j1 = -alpha * iy
                j2 = -it
                j3 = -1.0
                H[0, 0] += j0 * j0
                H[0, 1] += j0 * j1
                H[0, 2] += j0 * j2
                H[0, 3] += j0 * j3
                H[1, 1] += j1 * j1
                H[1, 2] += j1 * j2
                H[1, 3] += j1 * j3
                H[2, 2] += j2 * j2
                H[2, 3] += j2 * j3
                H[3, 3] += j3 * j3
                b[0] += j0 * r
                b[1] += j1 * r
                b[2] += j2 * r
                b[3] += j3 * r
        for a in range(4):
            for c in range(a):
                H[a, c] = H[c, a]
        w = np.linalg.eigvalsh(H)
        if w[0] <= 0.0 or w[3] / w[0] > max_cond:
            return cx, cy, alpha, beta, 3, n_iter
        delta = np.linalg.solve(H, -b)
        cx += delta[0]
        cy += delta[1]
        alpha += delta[2]
        beta += delta[3]
        n_iter += 1
        if np.sqrt(delta[0] * delta[0] + delta[1] * delta[1]) < tol:
            if alpha <= 0.0:
                return cx, cy, alpha, beta, 4, n_iter
            return cx, cy, alpha, beta, 0, n_iter
    return cx, cy, alpha, beta, 1, n_iter


@nb.njit(cache=True)
def shi_tomasi_response(img, window_half):
    """Min-eigenvalue response of the Sobel structure tensor.

    Borders (1 px gradient margin + window) are zero.
    """
    height, width = img.shape
    gx = np.zeros((height, width))
    gy = np.zeros((height, width))
    for y in range(1, height - 1):
        for x in range(1, width - 1):
            gx[y, x] = (img[y - 1, x + 1] + 2.0 * img[y, x + 1] + img[y + 1, x + 1]
                        - img[y - 1, x - 1] - 2.0 * img[y, x - 1] - img[y + 1, x - 1])
            gy[y, x] = (img[y + 1, x - 1] + 2.0 * img[y + 1, x] + img[y + 1, x + 1]
                        - img[y - 1, x - 1] - 2.0 * img[y - 1, x] - img[y - 1, x + 1])
    resp = np.zeros((height, width))
    lo = 1 + window_half
    for y in range(lo, height - lo):
        for x in range(lo, width - lo):
            sxx = 0.0
            sxy = 0.0
            syy = 0.0
            for dy in range(-window_half, window_half + 1):
                for dx in range(-window_half, window_half + 1):
                    a = gx[y + dy, x + dx]
                    c = gy[y + dy, x + dx]
                    sxx += a * a
                    sxy += a * c
                    syy += c * c
            tr = sxx + syy
            det_part = np.sqrt((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy)
            resp[y, x] = 0.5 * (tr - det_part)
    return resp


@nb.njit(cache=True, inline="always")
def _rest_y(py, px, pz, amp, phase_t, phase_scale):
    """Invert the deformation for the rest y coordinate (fixed point)."""
    y0 = py
    for _ in range(_REST_Y_ITERS):
        y0 = py - amp * np.sin(phase_t + phase_scale * (px + y0 + pz))
    return y0


@nb.njit(cache=True)
def raycast_tube(dirs, origin, radius, length, amp, phase_t, phase_scale,
                 step, max_dist):
    """March rays from inside an open deformed tube (axis along z).

    dirs: (N, 3) unit directions in world coordinates. Returns rest
    coordinates (N, 3), ray depths (N,), and a hit mask (N,).
    """
    n = dirs.shape[0]
    rest = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros(n, dtype=np.bool_)
    r2 = radius * radius
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in range(n):
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        y0 = _rest_y(oy, ox, oz, amp, phase_t, phase_scale)
        g_prev = r2 - (ox * ox + y0 * y0)
        if g_prev <= 0.0:
            continue  # origin outside the rest surface: no well-defined hit
        s_prev = 0.0
        s = step
        found = False
        while s <= max_dist:
            px = ox + s * dx
            py = oy + s * dy
            pz = oz + s * dz
            y0 = _rest_y(py, px, pz, amp, phase_t, phase_scale)
            g = r2 - (px * px + y0 * y0)
            if g <= 0.0:
                found = True
                break
            if (pz > length + step and dz > 0.0) or (pz < -step and dz < 0.0):
                break
            s_prev = s
            s += step
        if not found:
            continue
        lo = s_prev
        hi = s
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            px = ox + mid * dx
            py = oy + mid * dy
            pz = oz + mid * dz
            y0 = _rest_y(py, px, pz, amp, phase_t, phase_scale)
            if r2 - (px * px + y0 * y0) > 0.0:
                lo = mid
            else:
                hi = mid
        s_hit = 0.5 * (lo + hi)
        px = ox + s_hit * dx
        py = oy + s_hit * dy
        pz = oz + s_hit * dz
        if pz < 0.0 or pz > length:
            continue  # crossed the infinite cylinder beyond the open ends
        y0 = _rest_y(py, px, pz, amp, phase_t, phase_scale)
        rest[k, 0] = px
        rest[k, 1] = y0
        rest[k, 2] = pz
        depth[k] = s_hit
        hit[k] = True
    return rest, depth, hit


@nb.njit(cache=True)
def raycast_plane(dirs, origin, plane_y, half_x, half_z, amp, phase_t,
                  phase_scale, step, max_dist):
    """March rays onto a deformed height field y = plane_y + A sin(...)."""
    n = dirs.shape[0]
    rest = np.zeros((n, 3))
    depth = np.zeros(n)
    hit = np.zeros(n, dtype=np.bool_)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in range(n):
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        g_prev = (plane_y + amp * np.sin(phase_t + phase_scale * (ox + plane_y + oz))) - oy
        if g_prev <= 0.0:
            continue  # camera must be on the negative-y side
        s_prev = 0.0
        s = step
        found = False
        while s <= max_dist:
            px = ox + s * dx
            py = oy + s * dy
            pz = oz + s * dz
            g = (plane_y + amp * np.sin(phase_t + phase_scale * (px + plane_y + pz))) - py
            if g <= 0.0:
                found = True
                break
            s_prev = s
            s += step
        if not found:
            continue
        lo = s_prev
        hi = s
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            px = ox + mid * dx
            py = oy + mid * dy
            pz = oz + mid * dz
            g = (plane_y + amp * np.sin(phase_t + phase_scale * (px + plane_y + pz))) - py
            if g > 0.0:
                lo = mid
            else:
                hi = mid
        s_hit = 0.5 * (lo + hi)
        px = ox + s_hit * dx
        pz = oz + s_hit * dz
        if px < -half_x or px > half_x or pz < -half_z or pz > half_z:
            continue
        rest[k, 0] = px
        rest[k, 1] = plane_y
        rest[k, 2] = pz
        depth[k] = s_hit
        hit[k] = True
    return rest, depth, hit


@nb.njit(cache=True)
def texture_eval(points, tex_dirs, tex_freqs, tex_phases, tex_amps, base, scale):
    """Band-limited sinusoid-mixture texture over rest coordinates."""
    n = points.shape[0]
    m = tex_dirs.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(m):
            proj = (points[i, 0] * tex_dirs[k, 0]
                    + points[i, 1] * tex_dirs[k, 1]
                    + points[i, 2] * tex_dirs[k, 2])
            acc += tex_amps[k] * np.sin(tex_freqs[k] * proj + tex_phases[k])
        out[i] = base + scale * acc
    return out
