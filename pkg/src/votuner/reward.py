"""Image-space reward stack and the parametric compute-cost model.

Rewards are dimensionless; the cost model works in microseconds internally
and converts to seconds for the compute reward (see RewardConfig docstring
for the unit reasoning).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySequence, FrameMismatch
from .frontend import FeatureTrack, FrameStats
from .imagery import FlowField


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights; defaults are the published tuning.

    lam1/lam2/lam3 shape the per-feature drift term, lam4/lam5/lam6 the
    piecewise-linear coverage term around alpha0, lam7/lam8 the compute
    penalty.  A frame with zero usable features earns `no_feature_penalty`.
    """

    lam1: float = -15.0
    lam2: float = 0.15
    lam3: float = 5.0
    lam4: float = 0.3
    lam5: float = 3.0
    lam6: float = 0.03
    lam7: float = 10.2
    lam8: float = 0.1
    alpha0: float = 0.3
    grid: Tuple[int, int] = (8, 8)
    no_feature_penalty: float = -35.0

    def __post_init__(self):
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("grid dimensions must be >= 1")


@dataclass(frozen=True)
class CostModel:
    """Per-frame runtime estimate in microseconds, scaled by beta.

    tau_klt = nu1*n_klt + nu2*w^2 + nu3*n_klt*w^2
    tau_ransac = nu4*n_ransac + nu5*N + nu6*n_ransac*N
    tau = beta * (tau_klt + tau_ransac + tau_c)
    """

    tau_c: float = 187.9201
    nu1: float = 0.0731
    nu2: float = 0.0166
    nu3: float = 0.0010
    nu4: float = 2.4456
    nu5: float = 0.1042
    nu6: float = 0.0050
    beta: float = 10.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("tau_c", "nu1", "nu2", "nu3", "nu4", "nu5", "nu6"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class RewardBreakdown:
    frame_index: int
    r_drift: float
    r_cover: float
    r_comp: float
    r_total: float
    tau_ms: float
    alpha: float
    mean_drift_px: float


@dataclass
class ReferenceRun:
    """Per-frame breakdowns of a static-parameter run on a fixed sequence."""

    breakdowns: List[RewardBreakdown] = field(default_factory=list)

    def __len__(self):
        return len(self.breakdowns)

    def __getitem__(self, i):
        return self.breakdowns[i]


def feature_drift(track: FeatureTrack, flow_prev_to_cur: FlowField) -> Optional[float]:
    """Pixel deviation from the flow-predicted position, or None when the
    ground-truth flow at the previous position is unavailable."""
    if track.prev_position is None:
        return None
    px, py = track.prev_position
    w, h = flow_prev_to_cur.width, flow_prev_to_cur.height
    if not (0.0 <= px <= w - 1 and 0.0 <= py <= h - 1):
        return None
    x0 = min(int(px), w - 2) if w > 1 else 0
    y0 = min(int(py), h - 2) if h > 1 else 0
    if not flow_prev_to_cur.valid[y0 : y0 + 2, x0 : x0 + 2].all():
        return None
    fx = px - x0
    fy = py - y0
    du = flow_prev_to_cur.du
    dv = flow_prev_to_cur.dv
    gdu = (
        du[y0, x0] * (1 - fx) * (1 - fy)
        + du[y0, x0 + 1] * fx * (1 - fy)
        + du[y0 + 1, x0] * (1 - fx) * fy
        + du[y0 + 1, x0 + 1] * fx * fy
    )
    gdv = (
        dv[y0, x0] * (1 - fx) * (1 - fy)
        + dv[y0, x0 + 1] * fx * (1 - fy)
        + dv[y0 + 1, x0] * (1 - fx) * fy
        + dv[y0 + 1, x0 + 1] * fx * fy
    )
    ex = track.position[0] - (px + gdu)
    ey = track.position[1] - (py + gdv)
    return float(math.hypot(ex, ey))


def feature_drifts(tracks: Sequence[FeatureTrack], flow: FlowField) -> np.ndarray:
    """Vectorized drift of every track with a usable ground-truth flow sample."""
    prev = np.array(
        [t.prev_position for t in tracks if t.prev_position is not None], dtype=np.float64
    ).reshape(-1, 2)
    cur = np.array(
        [t.position for t in tracks if t.prev_position is not None], dtype=np.float64
    ).reshape(-1, 2)
    if prev.shape[0] == 0:
        return np.zeros(0)
    w, h = flow.width, flow.height
    inb = (prev[:, 0] >= 0) & (prev[:, 0] <= w - 1) & (prev[:, 1] >= 0) & (prev[:, 1] <= h - 1)
    prev = prev[inb]
    cur = cur[inb]
    if prev.shape[0] == 0:
        return np.zeros(0)
    x0 = np.minimum(prev[:, 0].astype(np.int64), w - 2)
    y0 = np.minimum(prev[:, 1].astype(np.int64), h - 2)
    v = flow.valid
    usable = v[y0, x0] & v[y0, x0 + 1] & v[y0 + 1, x0] & v[y0 + 1, x0 + 1]
    if not usable.any():
        return np.zeros(0)
    prev, cur, x0, y0 = prev[usable], cur[usable], x0[usable], y0[usable]
    fx = prev[:, 0] - x0
    fy = prev[:, 1] - y0
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    gdu = (flow.du[y0, x0] * w00 + flow.du[y0, x0 + 1] * w10
           + flow.du[y0 + 1, x0] * w01 + flow.du[y0 + 1, x0 + 1] * w11)
    gdv = (flow.dv[y0, x0] * w00 + flow.dv[y0, x0 + 1] * w10
           + flow.dv[y0 + 1, x0] * w01 + flow.dv[y0 + 1, x0 + 1] * w11)
    ex = cur[:, 0] - (prev[:, 0] + gdu)
    ey = cur[:, 1] - (prev[:, 1] + gdv)
    return np.hypot(ex, ey)


def r_drift(drifts: Sequence[float], config: RewardConfig = RewardConfig()) -> float:
    """Sum of lam1*tanh(lam2*drift) + lam3 per feature; penalty when empty."""
    if len(drifts) == 0:
        return config.no_feature_penalty
    d = np.asarray(drifts, dtype=np.float64)
    return float(np.sum(config.lam1 * np.tanh(config.lam2 * d) + config.lam3))


def coverage(positions: Sequence[Tuple[float, float]], width: int, height: int,
             grid: Tuple[int, int] = (8, 8)) -> float:
    """Fraction of grid cells holding at least one feature.

    Cells are width//gx by height//gy with remainder pixels folded into the
    last row/column.
    """
    gx, gy = grid
    if not positions:
        return 0.0
    cw = max(1, width // gx)
    ch = max(1, height // gy)
    occupied = set()
    for (x, y) in positions:
        cx = min(int(x // cw), gx - 1)
        cy = min(int(y // ch), gy - 1)
        occupied.add((cx, cy))
    return len(occupied) / (gx * gy)


def r_cover(alpha: float, config: RewardConfig = RewardConfig()) -> float:
    """Piecewise-linear coverage reward, continuous at alpha0."""
    slope = config.lam4 if alpha >= config.alpha0 else config.lam5
    return slope * (alpha - config.alpha0) + config.lam6


def estimate_runtime(stats: FrameStats, w: int, model: CostModel = CostModel()) -> float:
    """Estimated frame time in seconds under the parametric cost model."""
    w2 = float(w) * float(w)
    tau_klt = model.nu1 * stats.n_klt + model.nu2 * w2 + model.nu3 * stats.n_klt * w2
    tau_ransac = (
        model.nu4 * stats.n_ransac
        + model.nu5 * stats.tracked_count
        + model.nu6 * stats.n_ransac * stats.tracked_count
    )
    tau_us = model.beta * (tau_klt + tau_ransac + model.tau_c)
    return tau_us * 1e-6


def r_comp(tau_s: float, config: RewardConfig = RewardConfig()) -> float:
    """clip(-exp(-1/tau + lam7) + lam8, -10, 0.1) with tau in seconds."""
    if tau_s <= 0:
        raise ValueError("tau must be positive")
    exponent = -1.0 / tau_s + config.lam7
    # exp overflows float64 around 709; everything that large clips to -10 anyway.
    if exponent > 50.0:
        return -10.0
    return float(np.clip(-math.exp(exponent) + config.lam8, -10.0, 0.1))


def frame_reward(
    tracks: Sequence[FeatureTrack],
    flow_prev_to_cur: Optional[FlowField],
    stats: FrameStats,
    patch_size: int,
    width: int,
    height: int,
    frame_index: int = 0,
    config: RewardConfig = RewardConfig(),
    cost: CostModel = CostModel(),
) -> RewardBreakdown:
    """Compose drift, coverage, and compute rewards for one frame.

    Features whose ground-truth flow is unavailable are excluded from the
    drift count; a frame where KLT never ran contributes no patch setup cost.
    """
    if flow_prev_to_cur is not None:
        drifts = feature_drifts(tracks, flow_prev_to_cur)
    else:
        drifts = np.zeros(0)
    rd = r_drift(drifts, config)
    alpha = coverage([t.position for t in tracks], width, height, config.grid)
    rc = r_cover(alpha, config)
    w_eff = patch_size if stats.n_klt > 0 else 0
    tau_s = estimate_runtime(stats, w_eff, cost)
    rcmp = r_comp(tau_s, config)
    return RewardBreakdown(
        frame_index=frame_index,
        r_drift=rd,
        r_cover=rc,
        r_comp=rcmp,
        r_total=rd + rc + rcmp,
        tau_ms=tau_s * 1e3,
        alpha=alpha,
        mean_drift_px=float(np.mean(drifts)) if len(drifts) else 0.0,
    )


def training_reward(policy: RewardBreakdown, reference: RewardBreakdown) -> float:
    """Baseline-subtracted reward: policy total minus reference total."""
    if policy.frame_index != reference.frame_index:
        raise FrameMismatch(
            f"policy frame {policy.frame_index} vs reference frame {reference.frame_index}"
        )
    return policy.r_total - reference.r_total


@dataclass
class FrameRecord:
    """One evaluated frame: stats plus its reward breakdown."""

    breakdown: RewardBreakdown
    stats: FrameStats


def sequence_metrics(records: Sequence[FrameRecord], final_ages: Sequence[int], fps: float):
    """Aggregate a tracked sequence into the four headline metrics.

    Returns (drift px/s, mean feature age in frames, coverage %, mean tau ms).
    Age averages the final age of every feature ever created.
    """
    if len(records) == 0:
        raise EmptySequence("no frame records")
    mean_drift_px = float(np.mean([r.breakdown.mean_drift_px for r in records]))
    drift_px_s = mean_drift_px * fps
    age = float(np.mean(final_ages)) if len(final_ages) else 0.0
    cover_pct = float(np.mean([r.breakdown.alpha for r in records])) * 100.0
    tau_ms = float(np.mean([r.breakdown.tau_ms for r in records]))
    return drift_px_s, age, cover_pct, tau_ms


METRICS_CSV_HEADER = "sequence,frame,n_tracked,n_inliers,mean_drift_px,alpha,tau_ms,r_drift,r_cover,r_comp,r_total"


def metrics_csv_row(sequence: str, rec: FrameRecord, drift_known: bool = True) -> str:
    b = rec.breakdown
    drift = f"{b.mean_drift_px:.6f}" if drift_known else ""
    return (
        f"{sequence},{b.frame_index},{rec.stats.tracked_count},{rec.stats.inlier_count},"
        f"{drift},{b.alpha:.6f},{b.tau_ms:.6f},"
        f"{b.r_drift:.6f},{b.r_cover:.6f},{b.r_comp:.6f},{b.r_total:.6f}"
    )
