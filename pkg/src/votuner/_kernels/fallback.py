"""Pure-NumPy implementations of the hot kernels.

Semantics match ``_native`` (the Cython build); this module is selected at
import time when the extension is unavailable or VOTUNER_PURE_PYTHON is set.
"""

from __future__ import annotations

import numpy as np

BACKEND = "fallback"

# Radius-3 Bresenham circle, clockwise from 12 o'clock, as (dy, dx).
CIRCLE = (
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
)

_M32 = np.uint32(0x85EBCA6B)
_M32B = np.uint32(0xC2B2AE35)
CONTRAST_BOOST_NORM = np.tanh(2.2)


def _clamped_bilinear(arr, xs, ys):
    h, w = arr.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(np.int64), w - 2)
    y0 = np.minimum(ys.astype(np.int64), h - 2)
    fx = xs - x0
    fy = ys - y0
    return (
        arr[y0, x0] * (1 - fx) * (1 - fy)
        + arr[y0, x0 + 1] * fx * (1 - fy)
        + arr[y0 + 1, x0] * (1 - fx) * fy
        + arr[y0 + 1, x0 + 1] * fx * fy
    )


def fast_detect(img: np.ndarray, threshold: float):
    """FAST-9 segment test with continuous scores and 3x3 non-max suppression.

    Scores are arc margins on the 0..255 intensity scale; a pixel is a
    candidate iff its score is strictly greater than ``threshold``.  Ties in
    the NMS are broken toward the raster-earlier pixel.  Returns unsorted
    (ys, xs, scores).
    """
    h, w = img.shape
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float64))
    if h < 7 or w < 7:
        return empty
    center = img[3 : h - 3, 3 : w - 3]
    diffs = np.stack(
        [img[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx] - center for dy, dx in CIRCLE]
    )
    bright = diffs * 255.0
    dark = -bright

    def best_arc(margins):
        ext = np.concatenate([margins, margins[:8]], axis=0)
        wins = [ext[i : i + 9].min(axis=0) for i in range(16)]
        return np.max(np.stack(wins), axis=0)

    score = np.maximum(best_arc(bright), best_arc(dark))
    grid = np.zeros((h, w))
    inner = np.where(score > threshold, score, 0.0)
    grid[3 : h - 3, 3 : w - 3] = inner

    keep = grid > 0.0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = np.zeros_like(grid)
            ys0, ys1 = max(0, dy), h + min(0, dy)
            xs0, xs1 = max(0, dx), w + min(0, dx)
            nb[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx] = grid[ys0:ys1, xs0:xs1]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (grid > nb) if earlier else (grid >= nb)
    ys, xs = np.nonzero(keep)
    return ys, xs, grid[ys, xs]


def klt_track(prev_levels, cur_levels, gx_levels, gy_levels, pts, patch, max_iters, eps,
              residual_max=0.1):
    """Coarse-to-fine forward-additive Lucas-Kanade over precomputed pyramids.

    pts is (N, 2) float64 in level-0 pixels.  Returns (new_pts, ok, iters,
    residuals); ``iters`` counts solver iterations summed over levels.
    Failure causes: patch out of bounds at level 0, structure-tensor
    determinant below 1e-6, warped patch leaving the image, or final mean
    absolute residual above `residual_max`.
    """
    n = pts.shape[0]
    levels = len(prev_levels)
    r = (patch - 1) // 2
    out = pts.astype(np.float64).copy()
    ok = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n, dtype=np.float64)
    offy, offx = np.mgrid[-r : r + 1, -r : r + 1]
    offx = offx.astype(np.float64)
    offy = offy.astype(np.float64)

    def fits(x, y, w, h):
        return x - r >= 1.0 and x + r <= w - 2.0 and y - r >= 1.0 and y + r <= h - 2.0

    for i in range(n):
        x0, y0 = pts[i, 0], pts[i, 1]
        dx = dy = 0.0
        failed = False
        base_done = False
        for lvl in range(levels - 1, -1, -1):
            if lvl != levels - 1:
                dx *= 2.0
                dy *= 2.0
            scale = float(2 ** lvl)
            px, py = x0 / scale, y0 / scale
            prev = prev_levels[lvl]
            cur = cur_levels[lvl]
            gx = gx_levels[lvl]
            gy = gy_levels[lvl]
            h, w = prev.shape
            if not fits(px, py, w, h):
                continue
            tmpl = _clamped_bilinear(prev, px + offx, py + offy)
            for _ in range(max_iters):
                iters[i] += 1
                qx, qy = px + dx, py + dy
                if not fits(qx, qy, w, h):
                    failed = True
                    break
                cx = qx + offx
                cy = qy + offy
                icur = _clamped_bilinear(cur, cx, cy)
                igx = _clamped_bilinear(gx, cx, cy)
                igy = _clamped_bilinear(gy, cx, cy)
                err = tmpl - icur
                gxx = float((igx * igx).sum())
                gxy = float((igx * igy).sum())
                gyy = float((igy * igy).sum())
                det = gxx * gyy - gxy * gxy
                if det < 1e-6:
                    failed = True
                    break
                bx = float((err * igx).sum())
                by = float((err * igy).sum())
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
        fxp, fyp = x0 + dx, y0 + dy
        out[i, 0], out[i, 1] = fxp, fyp
        if failed or not base_done:
            continue
        prev = prev_levels[0]
        cur = cur_levels[0]
        h, w = prev.shape
        if not fits(fxp, fyp, w, h):
            continue
        tmpl = _clamped_bilinear(prev, x0 + offx, y0 + offy)
        icur = _clamped_bilinear(cur, fxp + offx, fyp + offy)
        resid[i] = float(np.abs(tmpl - icur).mean())
        ok[i] = resid[i] <= residual_max
    return out, ok, iters, resid


def motion_blur(img: np.ndarray, du: np.ndarray, dv: np.ndarray, exposure_fraction: float):
    """Average bilinear samples along x - s*flow(x)*exposure_fraction, s in [0, 1].

    Sample count per pixel: K = max(2, ceil(|flow|*exposure_fraction) + 1);
    out-of-bounds samples clamp to the border.
    """
    h, w = img.shape
    fx = du.astype(np.float64) * exposure_fraction
    fy = dv.astype(np.float64) * exposure_fraction
    mag = np.sqrt(fx * fx + fy * fy)
    k = np.maximum(2, np.ceil(mag).astype(np.int64) + 1)
    kmax = int(k.max())
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    acc = np.zeros((h, w))
    for j in range(kmax):
        active = j < k
        s = np.where(active, j / (k - 1.0), 0.0)
        sample = _clamped_bilinear(img, xs - s * fx, ys - s * fy)
        acc += np.where(active, sample, 0.0)
    return acc / k


def _hash01(ix, iy, seed):
    """Deterministic lattice hash onto [0, 1); identical to the C version."""
    seed_term = np.uint32((int(seed) * 0x27D4EB2F) & 0xFFFFFFFF)
    h = ix.astype(np.uint32) * _M32
    h ^= iy.astype(np.uint32) * _M32B
    h ^= seed_term
    h ^= h >> np.uint32(16)
    h *= _M32
    h ^= h >> np.uint32(13)
    h *= _M32B
    h ^= h >> np.uint32(16)
    return h.astype(np.float64) * (1.0 / 4294967296.0)


def value_noise(xs, ys, seed, octaves):
    """Fractal value noise in (-1, 1): quintic-faded lattice blend per octave."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    total = np.zeros(xs.shape)
    norm = 0.0
    amp = 1.0
    freq = 1.0
    for o in range(octaves):
        x = xs * freq
        y = ys * freq
        ix = np.floor(x).astype(np.int64)
        iy = np.floor(y).astype(np.int64)
        fx = x - ix
        fy = y - iy
        u = fx * fx * fx * (fx * (fx * 6.0 - 15.0) + 10.0)
        v = fy * fy * fy * (fy * (fy * 6.0 - 15.0) + 10.0)
        oseed = (int(seed) + o) & 0xFFFFFFFF
        v00 = _hash01(ix, iy, oseed)
        v10 = _hash01(ix + 1, iy, oseed)
        v01 = _hash01(ix, iy + 1, oseed)
        v11 = _hash01(ix + 1, iy + 1, oseed)
        blended = (v00 * (1 - u) + v10 * u) * (1 - v) + (v01 * (1 - u) + v11 * u) * v
        total += amp * (2.0 * blended - 1.0)
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


def render_planes(origin, dirs, centers, normals, e1, e2, half_ext,
                  tex_seed, tex_octaves, tex_freq, tex_contrast):
    """Ray-cast textured bounded planes; returns (intensity, depth).

    ``dirs`` is (H, W, 3) with rays scaled so the camera-frame z component is
    1, making the ray parameter equal the depth along the optical axis.
    Pixels hitting no plane get intensity 0.5 and depth +inf.
    """
    h, w, _ = dirs.shape
    npl = centers.shape[0]
    best_t = np.full((h, w), np.inf)
    best_plane = np.full((h, w), -1, dtype=np.int64)
    best_u = np.zeros((h, w))
    best_v = np.zeros((h, w))
    for p in range(npl):
        dn = dirs @ normals[p]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((centers[p] - origin) @ normals[p]) / dn
        hit = np.isfinite(t) & (t > 1e-6)
        pt = origin[None, None, :] + t[..., None] * dirs
        rel = pt - centers[p]
        lu = rel @ e1[p]
        lv = rel @ e2[p]
        hit &= (np.abs(lu) <= half_ext[p, 0]) & (np.abs(lv) <= half_ext[p, 1])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_plane = np.where(closer, p, best_plane)
        best_u = np.where(closer, lu, best_u)
        best_v = np.where(closer, lv, best_v)
    img = np.full((h, w), 0.5)
    for p in range(npl):
        mask = best_plane == p
        if not mask.any():
            continue
        n = value_noise(best_u[mask] * tex_freq[p], best_v[mask] * tex_freq[p],
                        tex_seed[p], int(tex_octaves[p]))
        # Saturating contrast curve: fractal values cluster near zero, so a
        # tanh boost restores real-image-like edge contrast.
        boosted = np.tanh(2.2 * n) / CONTRAST_BOOST_NORM
        img[mask] = np.clip(0.5 + 0.5 * tex_contrast[p] * boosted, 0.0, 1.0)
    return img, best_t
