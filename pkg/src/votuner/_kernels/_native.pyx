# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Cython implementations of the hot kernels; semantics match ``fallback``."""

import numpy as np

cimport cython
from libc.math cimport ceil, fabs, floor, sqrt, tanh, INFINITY, isfinite
from libc.stdint cimport int64_t, uint32_t

BACKEND = "native"

cdef int CDY[16]
cdef int CDX[16]
CDY[0] = -3; CDY[1] = -3; CDY[2] = -2; CDY[3] = -1; CDY[4] = 0; CDY[5] = 1
CDY[6] = 2; CDY[7] = 3; CDY[8] = 3; CDY[9] = 3; CDY[10] = 2; CDY[11] = 1
CDY[12] = 0; CDY[13] = -1; CDY[14] = -2; CDY[15] = -3
CDX[0] = 0; CDX[1] = 1; CDX[2] = 2; CDX[3] = 3; CDX[4] = 3; CDX[5] = 3
CDX[6] = 2; CDX[7] = 1; CDX[8] = 0; CDX[9] = -1; CDX[10] = -2; CDX[11] = -3
CDX[12] = -3; CDX[13] = -3; CDX[14] = -2; CDX[15] = -1


cdef inline double _bil(const double[:, ::1] a, double x, double y) noexcept nogil:
    cdef Py_ssize_t h = a.shape[0]
    cdef Py_ssize_t w = a.shape[1]
    cdef Py_ssize_t x0, y0
    cdef double fx, fy
    if x < 0.0:
        x = 0.0
    if x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    if y > h - 1.0:
        y = h - 1.0
    x0 = <Py_ssize_t>x
    y0 = <Py_ssize_t>y
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    fx = x - x0
    fy = y - y0
    return (a[y0, x0] * (1.0 - fx) * (1.0 - fy)
            + a[y0, x0 + 1] * fx * (1.0 - fy)
            + a[y0 + 1, x0] * (1.0 - fx) * fy
            + a[y0 + 1, x0 + 1] * fx * fy)


def fast_detect(const double[:, ::1] img, double threshold):
    """FAST-9 with continuous 0..255 scores and raster-tie 3x3 NMS; unsorted."""
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    if h < 7 or w < 7:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float64))
    grid_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] grid = grid_arr
    cdef Py_ssize_t x, y
    cdef int i, j, k
    cdef double c, mn_b, mn_d, sb, sd, s, v
    cdef double m[16]
    with nogil:
        for y in range(3, h - 3):
            for x in range(3, w - 3):
                c = img[y, x]
                for k in range(16):
                    m[k] = (img[y + CDY[k], x + CDX[k]] - c) * 255.0
                sb = -INFINITY
                sd = -INFINITY
                for i in range(16):
                    mn_b = INFINITY
                    mn_d = INFINITY
                    for j in range(9):
                        v = m[(i + j) % 16]
                        if v < mn_b:
                            mn_b = v
                        if -v < mn_d:
                            mn_d = -v
                    if mn_b > sb:
                        sb = mn_b
                    if mn_d > sd:
                        sd = mn_d
                s = sb if sb > sd else sd
                if s > threshold:
                    grid[y, x] = s

    cdef bint keep
    cdef int dy, dx
    cdef double nb
    cdef Py_ssize_t count = 0
    ys_arr = np.empty((h - 6) * (w - 6), dtype=np.int64)
    xs_arr = np.empty((h - 6) * (w - 6), dtype=np.int64)
    sc_arr = np.empty((h - 6) * (w - 6), dtype=np.float64)
    cdef int64_t[::1] ys_v = ys_arr
    cdef int64_t[::1] xs_v = xs_arr
    cdef double[::1] sc_v = sc_arr
    with nogil:
        for y in range(3, h - 3):
            for x in range(3, w - 3):
                s = grid[y, x]
                if s <= 0.0:
                    continue
                keep = True
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        if dy == 0 and dx == 0:
                            continue
                        nb = grid[y + dy, x + dx]
                        if dy < 0 or (dy == 0 and dx < 0):
                            if not (s > nb):
                                keep = False
                        else:
                            if not (s >= nb):
                                keep = False
                if keep:
                    ys_v[count] = y
                    xs_v[count] = x
                    sc_v[count] = s
                    count += 1
    return ys_arr[:count], xs_arr[:count], sc_arr[:count]


def klt_track(list prev_levels, list cur_levels, list gx_levels, list gy_levels,
              const double[:, ::1] pts, int patch, int max_iters, double eps,
              double residual_max=0.1):
    """Pyramidal forward-additive LK; see the fallback docstring for semantics."""
    cdef Py_ssize_t n = pts.shape[0]
    cdef int levels = len(prev_levels)
    cdef int r = (patch - 1) // 2
    out_arr = np.empty((n, 2), dtype=np.float64)
    ok_arr = np.zeros(n, dtype=np.uint8)
    iters_arr = np.zeros(n, dtype=np.int64)
    resid_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[::1] okv = ok_arr
    cdef int64_t[::1] iters = iters_arr
    cdef double[::1] resid = resid_arr

    cdef double tmpl[1681]
    cdef const double[:, ::1] prev, cur, gx, gy
    cdef Py_ssize_t i, h, w, x0, y0, row, col
    cdef int lvl, it, oy, ox, idx, side
    cdef double sx, sy, dx, dy, scale, px, py, qx, qy
    cdef double fxw, fyw, w00, w10, w01, w11
    cdef double gxx, gxy, gyy, bx, by, det, ddx, ddy, e
    cdef double tval, ival, igx, igy, racc
    cdef bint failed, base_done
    side = 2 * r + 1

    for i in range(n):
        sx = pts[i, 0]
        sy = pts[i, 1]
        dx = 0.0
        dy = 0.0
        failed = False
        base_done = False
        for lvl in range(levels - 1, -1, -1):
            if lvl != levels - 1:
                dx *= 2.0
                dy *= 2.0
            scale = <double>(1 << lvl)
            px = sx / scale
            py = sy / scale
            prev = prev_levels[lvl]
            cur = cur_levels[lvl]
            gx = gx_levels[lvl]
            gy = gy_levels[lvl]
            h = prev.shape[0]
            w = prev.shape[1]
            if not (px - r >= 1.0 and px + r <= w - 2.0 and py - r >= 1.0 and py + r <= h - 2.0):
                continue
            with nogil:
                # Integer patch offsets share one set of bilinear weights.
                x0 = <Py_ssize_t>floor(px)
                y0 = <Py_ssize_t>floor(py)
                fxw = px - x0
                fyw = py - y0
                w00 = (1.0 - fxw) * (1.0 - fyw)
                w10 = fxw * (1.0 - fyw)
                w01 = (1.0 - fxw) * fyw
                w11 = fxw * fyw
                idx = 0
                for oy in range(-r, r + 1):
                    row = y0 + oy
                    for ox in range(-r, r + 1):
                        col = x0 + ox
                        tmpl[idx] = (prev[row, col] * w00 + prev[row, col + 1] * w10
                                     + prev[row + 1, col] * w01 + prev[row + 1, col + 1] * w11)
                        idx += 1
                for it in range(max_iters):
                    iters[i] += 1
                    qx = px + dx
                    qy = py + dy
                    if not (qx - r >= 1.0 and qx + r <= w - 2.0
                            and qy - r >= 1.0 and qy + r <= h - 2.0):
                        failed = True
                        break
                    x0 = <Py_ssize_t>floor(qx)
                    y0 = <Py_ssize_t>floor(qy)
                    fxw = qx - x0
                    fyw = qy - y0
                    w00 = (1.0 - fxw) * (1.0 - fyw)
                    w10 = fxw * (1.0 - fyw)
                    w01 = (1.0 - fxw) * fyw
                    w11 = fxw * fyw
                    gxx = 0.0
                    gxy = 0.0
                    gyy = 0.0
                    bx = 0.0
                    by = 0.0
                    idx = 0
                    for oy in range(-r, r + 1):
                        row = y0 + oy
                        for ox in range(-r, r + 1):
                            col = x0 + ox
                            ival = (cur[row, col] * w00 + cur[row, col + 1] * w10
                                    + cur[row + 1, col] * w01 + cur[row + 1, col + 1] * w11)
                            igx = (gx[row, col] * w00 + gx[row, col + 1] * w10
                                   + gx[row + 1, col] * w01 + gx[row + 1, col + 1] * w11)
                            igy = (gy[row, col] * w00 + gy[row, col + 1] * w10
                                   + gy[row + 1, col] * w01 + gy[row + 1, col + 1] * w11)
                            e = tmpl[idx] - ival
                            gxx += igx * igx
                            gxy += igx * igy
                            gyy += igy * igy
                            bx += e * igx
                            by += e * igy
                            idx += 1
                    det = gxx * gyy - gxy * gxy
                    if det < 1e-6:
                        failed = True
                        break
                    ddx = (gyy * bx - gxy * by) / det
                    ddy = (gxx * by - gxy * bx) / det
                    dx += ddx
                    dy += ddy
                    if ddx * ddx + ddy * ddy < eps * eps:
                        break
            if failed:
                break
            if lvl == 0:
                base_done = True
        qx = sx + dx
        qy = sy + dy
        out[i, 0] = qx
        out[i, 1] = qy
        if failed or not base_done:
            continue
        prev = prev_levels[0]
        cur = cur_levels[0]
        h = prev.shape[0]
        w = prev.shape[1]
        if not (qx - r >= 1.0 and qx + r <= w - 2.0 and qy - r >= 1.0 and qy + r <= h - 2.0):
            continue
        racc = 0.0
        with nogil:
            for oy in range(-r, r + 1):
                for ox in range(-r, r + 1):
                    tval = _bil(prev, sx + ox, sy + oy)
                    ival = _bil(cur, qx + ox, qy + oy)
                    racc += fabs(tval - ival)
        resid[i] = racc / (side * side)
        if resid[i] <= residual_max:
            okv[i] = 1
    return out_arr, ok_arr.astype(bool), iters_arr, resid_arr


def motion_blur(const double[:, ::1] img, const float[:, ::1] du, const float[:, ::1] dv,
                double exposure_fraction):
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t x, y
    cdef int64_t k, j
    cdef double fx, fy, mag, acc, s
    with nogil:
        for y in range(h):
            for x in range(w):
                fx = (<double>du[y, x]) * exposure_fraction
                fy = (<double>dv[y, x]) * exposure_fraction
                mag = sqrt(fx * fx + fy * fy)
                k = <int64_t>ceil(mag) + 1
                if k < 2:
                    k = 2
                acc = 0.0
                for j in range(k):
                    s = j / (k - 1.0)
                    acc += _bil(img, x - s * fx, y - s * fy)
                out[y, x] = acc / k
    return out_arr


cdef inline uint32_t _hash32(int64_t ix, int64_t iy, uint32_t seed) noexcept nogil:
    cdef uint32_t h = (<uint32_t>ix) * <uint32_t>0x85EBCA6B
    h ^= (<uint32_t>iy) * <uint32_t>0xC2B2AE35
    h ^= seed * <uint32_t>0x27D4EB2F
    h ^= h >> 16
    h = h * <uint32_t>0x85EBCA6B
    h ^= h >> 13
    h = h * <uint32_t>0xC2B2AE35
    h ^= h >> 16
    return h


cdef inline double _vnoise_frac(double x, double y, uint32_t seed, int octaves) noexcept nogil:
    cdef double total = 0.0
    cdef double norm = 0.0
    cdef double amp = 1.0
    cdef double freq = 1.0
    cdef double xx, yy, fx, fy, u, v, v00, v10, v01, v11, blended
    cdef int64_t ix, iy
    cdef uint32_t oseed
    cdef int o
    cdef double inv = 1.0 / 4294967296.0
    for o in range(octaves):
        xx = x * freq
        yy = y * freq
        ix = <int64_t>floor(xx)
        iy = <int64_t>floor(yy)
        fx = xx - ix
        fy = yy - iy
        u = fx * fx * fx * (fx * (fx * 6.0 - 15.0) + 10.0)
        v = fy * fy * fy * (fy * (fy * 6.0 - 15.0) + 10.0)
        oseed = seed + <uint32_t>o
        v00 = _hash32(ix, iy, oseed) * inv
        v10 = _hash32(ix + 1, iy, oseed) * inv
        v01 = _hash32(ix, iy + 1, oseed) * inv
        v11 = _hash32(ix + 1, iy + 1, oseed) * inv
        blended = (v00 * (1.0 - u) + v10 * u) * (1.0 - v) + (v01 * (1.0 - u) + v11 * u) * v
        total += amp * (2.0 * blended - 1.0)
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


def value_noise(xs, ys, seed, octaves):
    xs_arr = np.ascontiguousarray(xs, dtype=np.float64)
    ys_arr = np.ascontiguousarray(ys, dtype=np.float64)
    shape = xs_arr.shape
    cdef const double[::1] xv = xs_arr.reshape(-1)
    cdef const double[::1] yv = ys_arr.reshape(-1)
    out_arr = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef uint32_t s = <uint32_t>(seed & 0xFFFFFFFF)
    cdef int oc = octaves
    with nogil:
        for i in range(n):
            out[i] = _vnoise_frac(xv[i], yv[i], s, oc)
    return out_arr.reshape(shape)


def render_planes(const double[::1] origin, const double[:, :, ::1] dirs,
                  const double[:, ::1] centers, const double[:, ::1] normals,
                  const double[:, ::1] e1, const double[:, ::1] e2, const double[:, ::1] half_ext,
                  tex_seed, tex_octaves, const double[::1] tex_freq, const double[::1] tex_contrast):
    cdef Py_ssize_t h = dirs.shape[0]
    cdef Py_ssize_t w = dirs.shape[1]
    cdef Py_ssize_t npl = centers.shape[0]
    img_arr = np.full((h, w), 0.5, dtype=np.float64)
    depth_arr = np.full((h, w), np.inf, dtype=np.float64)
    cdef double[:, ::1] img = img_arr
    cdef double[:, ::1] depth = depth_arr
    seeds_arr = np.ascontiguousarray(tex_seed, dtype=np.uint32)
    octs_arr = np.ascontiguousarray(tex_octaves, dtype=np.int32)
    cdef uint32_t[::1] seeds = seeds_arr
    cdef int[::1] octs = octs_arr
    cdef Py_ssize_t x, y, p
    cdef double ox = origin[0]
    cdef double oy = origin[1]
    cdef double oz = origin[2]
    cdef double dx, dy, dz, dn, t, px, py, pz, lu, lv, best_t, bu, bv, nval
    cdef Py_ssize_t best_p
    with nogil:
        for y in range(h):
            for x in range(w):
                dx = dirs[y, x, 0]
                dy = dirs[y, x, 1]
                dz = dirs[y, x, 2]
                best_t = INFINITY
                best_p = -1
                bu = 0.0
                bv = 0.0
                for p in range(npl):
                    dn = dx * normals[p, 0] + dy * normals[p, 1] + dz * normals[p, 2]
                    t = ((centers[p, 0] - ox) * normals[p, 0]
                         + (centers[p, 1] - oy) * normals[p, 1]
                         + (centers[p, 2] - oz) * normals[p, 2]) / dn
                    if not isfinite(t) or t <= 1e-6:
                        continue
                    px = ox + t * dx - centers[p, 0]
                    py = oy + t * dy - centers[p, 1]
                    pz = oz + t * dz - centers[p, 2]
                    lu = px * e1[p, 0] + py * e1[p, 1] + pz * e1[p, 2]
                    lv = px * e2[p, 0] + py * e2[p, 1] + pz * e2[p, 2]
                    if fabs(lu) <= half_ext[p, 0] and fabs(lv) <= half_ext[p, 1] and t < best_t:
                        best_t = t
                        best_p = p
                        bu = lu
                        bv = lv
                if best_p >= 0:
                    depth[y, x] = best_t
                    nval = _vnoise_frac(bu * tex_freq[best_p], bv * tex_freq[best_p],
                                        seeds[best_p], octs[best_p])
                    # Saturating contrast curve, matching the fallback.
                    nval = tanh(2.2 * nval) / tanh(2.2)
                    nval = 0.5 + 0.5 * tex_contrast[best_p] * nval
                    if nval < 0.0:
                        nval = 0.0
                    if nval > 1.0:
                        nval = 1.0
                    img[y, x] = nval
    return img_arr, depth_arr
