"""Feature detection and tracking pipeline: FAST, pyramidal KLT, 8-point
RANSAC outlier rejection, Tukey flow filtering, and feature replenishment.

`step_tracker` ties the stages together and fills the per-frame counters the
compute-cost model consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import DegenerateConfiguration, EmptyInput, InsufficientCorrespondences
from .imagery import GrayImage, ImagePyramid, build_pyramid

log = logging.getLogger(__name__)

FAST_MARGIN = 3  # Bresenham circle radius

KLT_MAX_ITERS = 30
KLT_EPSILON = 0.01
KLT_RESIDUAL_MAX = 0.1
# Gamma-space sensor noise at the simulator's default variance already puts
# the mean absolute frame-to-frame residual of a perfectly tracked patch near
# 0.12, so the pipeline default is looser than the bare-tracker default.
PIPELINE_RESIDUAL_MAX = 0.25
RANSAC_CONFIDENCE = 0.99
RANSAC_MAX_HYPOTHESES = 200
MAX_FEATURES = 400
# The continuous action range includes threshold 0, which would reject every
# correspondence; clamp to a small floor instead.
RANSAC_THRESHOLD_FLOOR = 0.25


@dataclass(frozen=True)
class FrontendConfig:
    """Fixed (non-tuned) knobs of the tracking pipeline."""

    max_features: int = MAX_FEATURES
    num_levels: int = 3
    klt_max_iters: int = KLT_MAX_ITERS
    klt_epsilon: float = KLT_EPSILON
    klt_residual_max: float = PIPELINE_RESIDUAL_MAX
    ransac_confidence: float = RANSAC_CONFIDENCE
    ransac_max_hypotheses: int = RANSAC_MAX_HYPOTHESES


@dataclass(frozen=True)
class FrontendParams:
    """The three per-frame tunable parameters."""

    fast_threshold: int
    klt_patch_size: int
    ransac_threshold: float

    def __post_init__(self):
        if not 0 <= self.fast_threshold <= 209:
            raise ValueError(f"fast_threshold {self.fast_threshold} outside {{0..209}}")
        if self.klt_patch_size % 2 != 1 or not 3 <= self.klt_patch_size <= 41:
            raise ValueError(f"klt_patch_size {self.klt_patch_size} not an odd value in 3..41")
        if not 0.0 <= self.ransac_threshold <= 3.0:
            raise ValueError(f"ransac_threshold {self.ransac_threshold} outside [0, 3]")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass
class FeatureTrack:
    id: int
    position: Tuple[float, float]
    prev_position: Optional[Tuple[float, float]]
    age: int
    status: str  # "new" | "tracked" | "lost"


@dataclass
class FrameStats:
    n_klt: int = 0
    n_ransac: int = 0
    tracked_count: int = 0
    detected_count: int = 0
    inlier_count: int = 0


@dataclass
class TrackerState:
    width: int
    height: int
    num_levels: int = 3
    tracks: List[FeatureTrack] = field(default_factory=list)
    prev_pyramid: Optional[ImagePyramid] = None
    frame_index: int = 0
    next_id: int = 0
    prev_count: int = 0
    cur_count: int = 0


def _detect_sorted(image: GrayImage, threshold: float):
    """Post-NMS FAST candidates as arrays sorted by (-score, y, x)."""
    ys, xs, scores = _kernels.fast_detect(image.data, float(threshold))
    order = np.lexsort((xs, ys, -scores))
    return xs[order].astype(np.float64), ys[order].astype(np.float64), scores[order]


def detection_candidates(image: GrayImage):
    """All FAST local maxima with positive score, strongest first.

    Because a suppressing neighbor always outscores the pixel it suppresses,
    non-max suppression at threshold t equals suppression at threshold 0
    filtered to score > t; the returned arrays can therefore be prefix-sliced
    for any threshold (see `filter_candidates`).
    """
    return _detect_sorted(image, 0.0)


def filter_candidates(candidates, threshold: float):
    """Prefix of threshold-0 candidates with score strictly above `threshold`."""
    xs, ys, scores = candidates
    cut = int(np.searchsorted(-scores, -float(threshold), side="left"))
    return xs[:cut], ys[:cut], scores[:cut]


class _SpacingGrid:
    """Uniform hash grid answering 'is any stored point within min_dist?'."""

    def __init__(self, min_dist: float):
        self.min_dist2 = min_dist * min_dist
        self.cell = max(min_dist, 1e-9)
        self.cells = {}

    def _key(self, x: float, y: float):
        return int(x // self.cell), int(y // self.cell)

    def blocked(self, x: float, y: float) -> bool:
        cx, cy = self._key(x, y)
        for kx in (cx - 1, cx, cx + 1):
            for ky in (cy - 1, cy, cy + 1):
                for px, py in self.cells.get((kx, ky), ()):
                    if (x - px) ** 2 + (y - py) ** 2 < self.min_dist2:
                        return True
        return False

    def add(self, x: float, y: float) -> None:
        self.cells.setdefault(self._key(x, y), []).append((x, y))


def detect_fast(
    image: GrayImage,
    threshold: int,
    exclusion_points: Optional[np.ndarray] = None,
    min_distance: float = 0.0,
) -> List[Keypoint]:
    """FAST-9 corners above `threshold` (0..255 scale), best first.

    A pixel qualifies when at least 9 contiguous pixels on its radius-3
    Bresenham circle are all brighter than center+t or all darker than
    center-t; the score is the largest t for which the test still passes.
    3x3 non-max suppression is applied, then candidates strictly closer than
    `min_distance` to any exclusion point are dropped.
    """
    xs, ys, scores = _detect_sorted(image, threshold)
    if len(ys) and exclusion_points is not None and len(exclusion_points) and min_distance > 0:
        grid = _SpacingGrid(min_distance)
        for px, py in np.asarray(exclusion_points, dtype=np.float64).reshape(-1, 2):
            grid.add(px, py)
        keep = [i for i in range(len(xs)) if not grid.blocked(xs[i], ys[i])]
        xs, ys, scores = xs[keep], ys[keep], scores[keep]
    return [Keypoint(float(x), float(y), float(s)) for x, y, s in zip(xs, ys, scores)]


def pyramid_gradients(pyramid: ImagePyramid):
    """Sobel-style smoothed gradient images per level (zero at borders).

    The cross-direction [1, 2, 1]/4 smoothing suppresses sensor noise in the
    structure tensor; on a linear ramp the response equals the central
    difference.
    """
    gxs, gys = [], []
    for lvl in pyramid.levels:
        a = lvl.data
        gx = np.zeros_like(a)
        gy = np.zeros_like(a)
        sy = a[:-2, :] + 2.0 * a[1:-1, :] + a[2:, :]
        gx[1:-1, 1:-1] = (sy[:, 2:] - sy[:, :-2]) / 8.0
        sx = a[:, :-2] + 2.0 * a[:, 1:-1] + a[:, 2:]
        gy[1:-1, 1:-1] = (sx[2:, :] - sx[:-2, :]) / 8.0
        gxs.append(gx)
        gys.append(gy)
    return gxs, gys


def track_klt(
    prev: ImagePyramid,
    cur: ImagePyramid,
    points: np.ndarray,
    patch_size: int,
    max_iters: int = KLT_MAX_ITERS,
    epsilon: float = KLT_EPSILON,
    residual_max: float = KLT_RESIDUAL_MAX,
    cur_gradients=None,
):
    """Track `points` (N, 2) from `prev` to `cur`.

    Returns (new_points (N, 2), ok (N,), iterations (N,), residuals (N,)).
    """
    if patch_size % 2 != 1 or patch_size < 3:
        raise ValueError("patch_size must be odd and >= 3")
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        z = np.zeros(0)
        return pts, z.astype(bool), z.astype(np.int64), z
    if cur_gradients is None:
        cur_gradients = pyramid_gradients(cur)
    gxs, gys = cur_gradients
    prev_arrs = [l.data for l in prev.levels]
    cur_arrs = [l.data for l in cur.levels]
    return _kernels.klt_track(
        prev_arrs, cur_arrs, gxs, gys, pts, patch_size, max_iters, epsilon, residual_max
    )


def _normalize_points(pts: np.ndarray):
    """Hartley normalization: centroid to origin, mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.sqrt((centered ** 2).sum(axis=1)).mean()
    if mean_dist < 1e-12:
        return None, None
    s = np.sqrt(2.0) / mean_dist
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return centered * s, T


def _eight_point(pts_prev: np.ndarray, pts_cur: np.ndarray) -> Optional[np.ndarray]:
    """Normalized 8-point fit of F with rank-2 enforcement; x_cur' F x_prev = 0.

    The null vector comes from the smallest eigenvector of A^T A (9x9
    symmetric), which is much cheaper than a tall SVD inside the RANSAC loop.
    """
    n1, t1 = _normalize_points(pts_prev)
    n2, t2 = _normalize_points(pts_cur)
    if n1 is None or n2 is None:
        return None
    x1, y1 = n1[:, 0], n1[:, 1]
    x2, y2 = n2[:, 0], n2[:, 1]
    a = np.stack(
        [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, np.ones_like(x1)], axis=1
    )
    try:
        _, vecs = np.linalg.eigh(a.T @ a)
    except np.linalg.LinAlgError:
        return None
    f = vecs[:, 0].reshape(3, 3)
    try:
        u, s, vt2 = np.linalg.svd(f)
    except np.linalg.LinAlgError:
        return None
    if s[1] < 1e-12:  # rank < 2: degenerate sample
        return None
    f = u @ np.diag([s[0], s[1], 0.0]) @ vt2
    f = t2.T @ f @ t1
    norm = np.abs(f).max()
    if not np.isfinite(norm) or norm < 1e-15:
        return None
    return f / norm


def sampson_distance(f: np.ndarray, pts_prev: np.ndarray, pts_cur: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error in pixels for x_cur' F x_prev = 0."""
    ones = np.ones((pts_prev.shape[0], 1))
    x1 = np.hstack([pts_prev, ones])
    x2 = np.hstack([pts_cur, ones])
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.abs(np.sum(x2 * fx1, axis=1))
    den = np.sqrt(fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num / den
    d[~np.isfinite(d)] = np.inf
    return d


def _eight_point_batch(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Normalized 8-point fits for a stack of minimal samples.

    p1/p2 are (H, 8, 2); returns (H, 3, 3) with NaN-filled slots for
    degenerate samples.
    """
    hcount = p1.shape[0]
    out = np.full((hcount, 3, 3), np.nan)

    def normalize(p):
        c = p.mean(axis=1, keepdims=True)
        d = p - c
        md = np.sqrt((d ** 2).sum(axis=2)).mean(axis=1)
        ok = md > 1e-12
        s = np.where(ok, np.sqrt(2.0) / np.where(ok, md, 1.0), 0.0)
        t = np.zeros((p.shape[0], 3, 3))
        t[:, 0, 0] = s
        t[:, 1, 1] = s
        t[:, 2, 2] = 1.0
        t[:, 0, 2] = -s * c[:, 0, 0]
        t[:, 1, 2] = -s * c[:, 0, 1]
        return d * s[:, None, None], t, ok

    n1, t1, ok1 = normalize(p1)
    n2, t2, ok2 = normalize(p2)
    good = ok1 & ok2
    if not good.any():
        return out
    x1, y1 = n1[..., 0], n1[..., 1]
    x2, y2 = n2[..., 0], n2[..., 1]
    a = np.stack(
        [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, np.ones_like(x1)], axis=2
    )
    ata = np.einsum("hki,hkj->hij", a, a)
    try:
        _, vecs = np.linalg.eigh(ata[good])
    except np.linalg.LinAlgError:
        return out
    f = vecs[:, :, 0].reshape(-1, 3, 3)
    try:
        u, s, vt = np.linalg.svd(f)
    except np.linalg.LinAlgError:
        return out
    nondeg = s[:, 1] >= 1e-12
    s = s.copy()
    s[:, 2] = 0.0
    f2 = u @ (s[:, :, None] * vt)
    f2 = np.transpose(t2[good], (0, 2, 1)) @ f2 @ t1[good]
    norms = np.abs(f2).max(axis=(1, 2))
    valid = nondeg & np.isfinite(norms) & (norms > 1e-15)
    f2 = np.where(valid[:, None, None], f2 / np.where(valid, norms, 1.0)[:, None, None], np.nan)
    out[good] = f2
    return out


def estimate_fundamental_ransac(
    pts_prev: np.ndarray,
    pts_cur: np.ndarray,
    threshold: float,
    confidence: float = RANSAC_CONFIDENCE,
    max_hypotheses: int = RANSAC_MAX_HYPOTHESES,
    rng: Optional[np.random.Generator] = None,
    chunk: int = 8,
):
    """8-point RANSAC on matched points; returns (F, inlier_mask, hypotheses_used).

    Hypotheses are minimal normalized 8-point fits scored by Sampson distance,
    evaluated in small batches; termination is adaptive at `confidence` or
    `max_hypotheses`.  The final F is refit on the best inlier set and the
    returned mask is consistent with that refit F.
    """
    pts_prev = np.asarray(pts_prev, dtype=np.float64).reshape(-1, 2)
    pts_cur = np.asarray(pts_cur, dtype=np.float64).reshape(-1, 2)
    n = pts_prev.shape[0]
    if n < 8:
        raise InsufficientCorrespondences(f"need >= 8 correspondences, got {n}")
    if rng is None:
        rng = np.random.default_rng()

    ones = np.ones((n, 1))
    x1h = np.hstack([pts_prev, ones])
    x2h = np.hstack([pts_cur, ones])

    best_mask = None
    best_count = -1
    hypotheses = 0
    needed = max_hypotheses
    any_valid = False
    while hypotheses < min(needed, max_hypotheses):
        batch = min(chunk, min(needed, max_hypotheses) - hypotheses)
        sels = np.stack([rng.choice(n, size=8, replace=False) for _ in range(batch)])
        hypotheses += batch
        fs = _eight_point_batch(pts_prev[sels], pts_cur[sels])
        ok_f = np.isfinite(fs[:, 0, 0])
        if not ok_f.any():
            continue
        any_valid = True
        fx1 = np.einsum("hij,nj->hni", fs[ok_f], x1h)
        ftx2 = np.einsum("hji,nj->hni", fs[ok_f], x2h)
        num = np.abs(np.einsum("ni,hni->hn", x2h, fx1))
        den = np.sqrt(fx1[..., 0] ** 2 + fx1[..., 1] ** 2 + ftx2[..., 0] ** 2 + ftx2[..., 1] ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = num / den
        dist[~np.isfinite(dist)] = np.inf
        masks = dist <= threshold
        counts = masks.sum(axis=1)
        k = int(np.argmax(counts))
        if int(counts[k]) > best_count:
            best_count = int(counts[k])
            best_mask = masks[k]
            ratio = best_count / n
            if ratio >= 1.0:
                needed = hypotheses
            elif ratio > 0:
                est = np.log(max(1e-12, 1.0 - confidence)) / np.log(1.0 - ratio ** 8)
                needed = int(np.ceil(est)) if np.isfinite(est) else max_hypotheses

    if not any_valid:
        raise DegenerateConfiguration("all RANSAC hypotheses were degenerate")
    return _refit_or_raise(pts_prev, pts_cur, best_mask, threshold, hypotheses)


def _refit_or_raise(pts_prev, pts_cur, mask, threshold, hypotheses):
    idx = np.nonzero(mask)[0]
    if len(idx) >= 8:
        f = _eight_point(pts_prev[idx], pts_cur[idx])
        if f is None:
            raise DegenerateConfiguration("inlier refit was rank-deficient")
        final_mask = sampson_distance(f, pts_prev, pts_cur) <= threshold
        return f, final_mask, hypotheses
    raise DegenerateConfiguration("best hypothesis retained fewer than 8 inliers")


def tukey_filter(flow_magnitudes: Sequence[float]) -> np.ndarray:
    """Keep mask for magnitudes within Q3 + 1.5*IQR (type-7 quartiles)."""
    mags = np.asarray(flow_magnitudes, dtype=np.float64)
    if mags.size == 0:
        raise EmptyInput("tukey_filter needs at least one magnitude")
    q1, q3 = np.percentile(mags, [25.0, 75.0])
    cutoff = q3 + 1.5 * (q3 - q1)
    return mags <= cutoff


def step_tracker(
    state: TrackerState,
    image: GrayImage,
    params: FrontendParams,
    config: Optional[FrontendConfig] = None,
    rng: Optional[np.random.Generator] = None,
    detections=None,
) -> Tuple[TrackerState, FrameStats, List[FeatureTrack]]:
    """Advance the tracker by one frame.

    Stage order: KLT on existing tracks, RANSAC outlier rejection when at
    least 8 survive, Tukey filtering of flow magnitudes, then FAST
    replenishment spaced ceil(patch/2) from all kept features.  Mutates
    `state` in place and returns (state, stats, active_tracks).

    `detections` may carry precomputed threshold-0 candidates from
    `detection_candidates` (they are equivalent to detecting at the frame's
    own threshold); otherwise detection runs on the spot.
    """
    if image.width != state.width or image.height != state.height:
        raise ValueError("frame size does not match tracker state")
    if config is None:
        config = FrontendConfig(num_levels=state.num_levels)
    if rng is None:
        rng = np.random.default_rng()
    max_features = config.max_features
    stats = FrameStats()
    pyramid = build_pyramid(image, state.num_levels)
    min_dist = float(int(np.ceil(params.klt_patch_size / 2)))
    # Patch margin: positions must keep the whole patch one pixel inside the
    # image so gradient sampling stays interior (track_klt precondition).
    margin = params.klt_patch_size // 2 + 1
    lo_x, hi_x = float(margin), float(state.width - 1 - margin)
    lo_y, hi_y = float(margin), float(state.height - 1 - margin)

    survivors: List[FeatureTrack] = []
    if state.prev_pyramid is not None and state.tracks:
        trackable = [
            t for t in state.tracks
            if lo_x <= t.position[0] <= hi_x and lo_y <= t.position[1] <= hi_y
        ]
        pts = np.array([t.position for t in trackable], dtype=np.float64).reshape(-1, 2)
        new_pts, ok, iters, _resid = track_klt(
            state.prev_pyramid, pyramid, pts, params.klt_patch_size,
            config.klt_max_iters, config.klt_epsilon, config.klt_residual_max,
        )
        stats.n_klt = int(iters.sum())
        tracked = [
            replace_track(t, (new_pts[i, 0], new_pts[i, 1]))
            for i, t in enumerate(trackable)
            if ok[i]
        ]
        stats.tracked_count = len(tracked)

        if len(tracked) >= 8:
            prev_xy = np.array([t.prev_position for t in tracked])
            cur_xy = np.array([t.position for t in tracked])
            eff_thr = params.ransac_threshold
            if eff_thr < RANSAC_THRESHOLD_FLOOR:
                log.debug("ransac threshold %.3f floored to %.2f", eff_thr, RANSAC_THRESHOLD_FLOOR)
                eff_thr = RANSAC_THRESHOLD_FLOOR
            try:
                _, inlier_mask, nh = estimate_fundamental_ransac(
                    prev_xy, cur_xy, eff_thr,
                    config.ransac_confidence, config.ransac_max_hypotheses, rng,
                )
                stats.n_ransac = nh
                tracked = [t for t, keep in zip(tracked, inlier_mask) if keep]
            except DegenerateConfiguration:
                stats.n_ransac = config.ransac_max_hypotheses
        stats.inlier_count = len(tracked)

        if tracked:
            mags = np.array(
                [np.hypot(t.position[0] - t.prev_position[0], t.position[1] - t.prev_position[1])
                 for t in tracked]
            )
            keep = tukey_filter(mags)
            tracked = [t for t, k in zip(tracked, keep) if k]
        survivors = tracked
    else:
        stats.tracked_count = 0

    new_tracks: List[FeatureTrack] = []
    if len(survivors) < max_features:
        grid = _SpacingGrid(min_dist)
        for t in survivors:
            grid.add(t.position[0], t.position[1])
        xs, ys, _scores = _detect_sorted(image, params.fast_threshold)
        budget = max_features - len(survivors)
        for x, y in zip(xs, ys):
            if len(new_tracks) >= budget:
                break
            if not (lo_x <= x <= hi_x and lo_y <= y <= hi_y):
                continue
            if grid.blocked(x, y):
                continue
            grid.add(x, y)
            new_tracks.append(
                FeatureTrack(id=state.next_id, position=(float(x), float(y)),
                             prev_position=None, age=1, status="new")
            )
            state.next_id += 1
    stats.detected_count = len(new_tracks)

    active = survivors + new_tracks
    state.tracks = active
    state.prev_pyramid = pyramid
    state.frame_index += 1
    state.prev_count = state.cur_count
    state.cur_count = len(active)
    return state, stats, active


def replace_track(track: FeatureTrack, new_position: Tuple[float, float]) -> FeatureTrack:
    return FeatureTrack(
        id=track.id,
        position=(float(new_position[0]), float(new_position[1])),
        prev_position=track.position,
        age=track.age + 1,
        status="tracked",
    )
