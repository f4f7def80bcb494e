"""Procedural scenes with exact ground-truth optical flow.

Scenes are collections of textured bounded planes (one huge background plane
plus foreground patches).  Rendering is a per-pixel ray cast, so the flow
between two poses can be computed in closed form from the depth buffer; the
motion-blur and gamma-space sensor-noise augmentations are applied to the
rendered images only and never touch the geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import _kernels
from .errors import DuplicateWaypointTimes
from .imagery import FlowField, GrayImage, PinholeCamera, Pose, SequenceFrame

OCCLUSION_TOL_M = 0.01


@dataclass(frozen=True)
class TextureSpec:
    octaves: int = 4
    base_frequency: float = 1.5  # cycles per meter at the first octave
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")


@dataclass(frozen=True)
class Scene:
    """Plane soup in struct-of-arrays form, ready for the render kernel."""

    centers: np.ndarray  # (P, 3)
    normals: np.ndarray  # (P, 3) unit
    e1: np.ndarray  # (P, 3) in-plane axis
    e2: np.ndarray  # (P, 3) in-plane axis
    half_ext: np.ndarray  # (P, 2) meters
    tex_seed: np.ndarray  # (P,) uint32
    tex_octaves: np.ndarray  # (P,) int32
    tex_freq: np.ndarray  # (P,)
    tex_contrast: np.ndarray  # (P,)
    background_depth: float
    seed: int

    @property
    def num_planes(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    fps: float

    def __post_init__(self):
        for a, b in zip(self.poses, self.poses[1:]):
            dot = abs(float(np.dot(a.rotation, b.rotation)))
            ang = 2.0 * math.degrees(math.acos(min(1.0, dot)))
            if ang >= 30.0:
                raise ValueError(f"rotation change of {ang:.1f} deg/frame exceeds 30")

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True)
class AugmentConfig:
    exposure_s: float = 0.0125
    noise_variance: float = 0.01
    gamma: float = 2.2
    enable_blur: bool = True
    enable_noise: bool = True

    def __post_init__(self):
        if self.exposure_s < 0 or self.noise_variance < 0 or self.gamma <= 0:
            raise ValueError("invalid augmentation parameters")


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.array([0.0, 0.0, 0.0, 1.0])
    half = 0.5 * angle
    q = np.empty(4)
    q[:3] = axis / n * math.sin(half)
    q[3] = math.cos(half)
    return q


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        q = q0 + s * (q1 - q0)
    else:
        theta = math.acos(min(1.0, dot))
        q = (math.sin((1.0 - s) * theta) * q0 + math.sin(s * theta) * q1) / math.sin(theta)
    return q / np.linalg.norm(q)


def generate_scene(seed: int, texture: Optional[TextureSpec] = None, num_planes: int = 6) -> Scene:
    """Deterministic scene: a far background plane plus foreground patches.

    The background spans the whole field of view for any moderate trajectory;
    foreground patches sit at random depths between 2 m and 70% of the
    background depth, with mild random tilts.
    """
    if num_planes < 1:
        raise ValueError("num_planes must be >= 1")
    if texture is None:
        texture = TextureSpec()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE0E]))
    background_depth = 12.0

    centers, normals, e1s, e2s, half_ext = [], [], [], [], []
    tex_seed, tex_oct, tex_freq, tex_con = [], [], [], []

    def add_plane(center, normal, half_u, half_v, freq, contrast):
        normal = normal / np.linalg.norm(normal)
        # Build in-plane axes orthogonal to the normal.
        helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(helper, normal)
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        centers.append(center)
        normals.append(normal)
        e1s.append(u)
        e2s.append(v)
        half_ext.append([half_u, half_v])
        tex_seed.append(rng.integers(0, 2 ** 32, dtype=np.uint32))
        tex_oct.append(texture.octaves)
        tex_freq.append(freq)
        tex_con.append(contrast)

    # Frequencies scale inversely with depth so the on-image texture
    # wavelength is roughly depth-independent.
    add_plane(
        np.array([0.0, 0.0, background_depth]),
        np.array([0.0, 0.0, -1.0]),
        60.0 * background_depth,
        60.0 * background_depth,
        texture.base_frequency,
        texture.contrast,
    )
    for _ in range(num_planes - 1):
        depth = rng.uniform(2.0, 0.7 * background_depth)
        lateral = rng.uniform(-0.45, 0.45, size=2) * depth
        center = np.array([lateral[0], lateral[1], depth])
        tilt_axis = rng.normal(size=3)
        tilt_axis[2] = 0.0
        tilt = quat_from_axis_angle(tilt_axis, rng.uniform(-0.6, 0.6))
        normal = Pose(tilt / np.linalg.norm(tilt) if np.linalg.norm(tilt) else np.array([0, 0, 0, 1.0]),
                      np.zeros(3)).matrix() @ np.array([0.0, 0.0, -1.0])
        size = rng.uniform(0.25, 0.6) * depth
        freq = (texture.base_frequency * background_depth / depth
                * float(2.0 ** rng.uniform(-0.5, 0.5)))
        contrast = texture.contrast * float(rng.uniform(0.7, 1.0))
        add_plane(center, normal, size, size, freq, contrast)

    return Scene(
        centers=np.array(centers),
        normals=np.array(normals),
        e1=np.array(e1s),
        e2=np.array(e2s),
        half_ext=np.array(half_ext),
        tex_seed=np.array(tex_seed, dtype=np.uint32),
        tex_octaves=np.array(tex_oct, dtype=np.int32),
        tex_freq=np.array(tex_freq),
        tex_contrast=np.array(tex_con),
        background_depth=background_depth,
        seed=int(seed),
    )


def spline_trajectory(
    waypoints: Sequence[Pose],
    n_frames: int,
    fps: float = 30.0,
    times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Interpolate sparse waypoints: natural cubic splines for translation,
    spherical quaternion interpolation with cubic easing for rotation."""
    if len(waypoints) < 2:
        raise ValueError("need at least 2 waypoints")
    if times is None:
        times = np.linspace(0.0, 1.0, len(waypoints))
    else:
        times = np.asarray(times, dtype=np.float64)
        if len(times) != len(waypoints):
            raise ValueError("times/waypoints length mismatch")
    if np.any(np.diff(times) == 0):
        raise DuplicateWaypointTimes("waypoint times must be distinct")
    order = np.argsort(times)
    times = times[order]
    waypoints = [waypoints[i] for i in order]

    trans = np.stack([wp.translation for wp in waypoints])
    spline = CubicSpline(times, trans, axis=0, bc_type="natural")
    sample_times = np.linspace(times[0], times[-1], n_frames)
    positions = spline(sample_times)

    quats = [wp.rotation for wp in waypoints]
    poses = []
    for k, t in enumerate(sample_times):
        seg = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        u = (t - times[seg]) / (times[seg + 1] - times[seg])
        u = min(max(u, 0.0), 1.0)
        ease = u * u * (3.0 - 2.0 * u)
        q = slerp(quats[seg], quats[seg + 1], ease)
        poses.append(Pose(q, positions[k]))
    return Trajectory(tuple(poses), fps)


def random_trajectory(
    seed: int,
    n_frames: int,
    fps: float = 30.0,
    translation_scale: float = 0.35,
    rotation_scale_deg: float = 8.0,
    n_waypoints: Optional[int] = None,
) -> Trajectory:
    """Smooth random camera motion near the origin, looking down +z.

    Waypoint density defaults to one per ~24 frames so per-frame image motion
    stays in the low single-digit pixel range regardless of episode length.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A11]))
    if n_waypoints is None:
        n_waypoints = max(3, n_frames // 24)
    waypoints = []
    q = np.array([0.0, 0.0, 0.0, 1.0])
    for k in range(n_waypoints):
        t = rng.uniform(-1.0, 1.0, size=3) * translation_scale
        t[2] *= 0.5
        if k > 0:
            axis = rng.normal(size=3)
            ang = math.radians(rng.uniform(-rotation_scale_deg, rotation_scale_deg))
            q = quat_multiply(waypoints[-1].rotation, quat_from_axis_angle(axis, ang))
            q /= np.linalg.norm(q)
        waypoints.append(Pose(q, t))
    return spline_trajectory(waypoints, n_frames, fps)


def camera_rays(camera: PinholeCamera, pose: Pose) -> np.ndarray:
    """World-frame ray directions (H, W, 3) scaled so camera-frame z is 1."""
    xs = (np.arange(camera.width) - camera.cx) / camera.fx
    ys = (np.arange(camera.height) - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    return d_cam @ pose.matrix().T


def render_frame(scene: Scene, pose: Pose, camera: PinholeCamera):
    """Ray-cast the scene; returns (GrayImage, depth map along the optical axis)."""
    dirs = np.ascontiguousarray(camera_rays(camera, pose))
    img, depth = _kernels.render_planes(
        np.ascontiguousarray(pose.translation, dtype=np.float64),
        dirs,
        np.ascontiguousarray(scene.centers),
        np.ascontiguousarray(scene.normals),
        np.ascontiguousarray(scene.e1),
        np.ascontiguousarray(scene.e2),
        np.ascontiguousarray(scene.half_ext),
        scene.tex_seed,
        scene.tex_octaves,
        np.ascontiguousarray(scene.tex_freq),
        np.ascontiguousarray(scene.tex_contrast),
    )
    return GrayImage(img), depth


def gt_flow(
    scene: Scene,
    pose_t: Pose,
    pose_t1: Pose,
    camera: PinholeCamera,
    depth_t: Optional[np.ndarray] = None,
    depth_t1: Optional[np.ndarray] = None,
) -> FlowField:
    """Exact flow from frame t to t+1 by unprojecting the depth buffer.

    Pixels are invalid where the surface point leaves the next frame or is
    occluded (reprojected depth exceeds the rendered depth by more than 1 cm).
    """
    if depth_t is None:
        depth_t = render_frame(scene, pose_t, camera)[1]
    if depth_t1 is None:
        depth_t1 = render_frame(scene, pose_t1, camera)[1]
    h, w = depth_t.shape
    dirs = camera_rays(camera, pose_t)
    pts = pose_t.translation[None, None, :] + depth_t[..., None] * dirs

    r1 = pose_t1.matrix()
    rel = pts - pose_t1.translation[None, None, :]
    cam1 = rel @ r1  # equivalent to R^T @ rel per pixel
    z1 = cam1[..., 2]
    in_front = z1 > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u1 = camera.fx * cam1[..., 0] / z1 + camera.cx
        v1 = camera.fy * cam1[..., 1] / z1 + camera.cy

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    du = np.where(in_front, u1 - gx, 0.0)
    dv = np.where(in_front, v1 - gy, 0.0)

    valid = in_front & (u1 >= 0) & (u1 <= w - 1) & (v1 >= 0) & (v1 <= h - 1)
    # Occlusion: compare reprojected depth with the rendered depth at target.
    uq = np.clip(np.where(valid, u1, 0.0), 0, w - 1)
    vq = np.clip(np.where(valid, v1, 0.0), 0, h - 1)
    from .imagery import bilinear_grid

    d_at_target = bilinear_grid(depth_t1, uq, vq)
    valid &= z1 <= d_at_target + OCCLUSION_TOL_M
    return FlowField(du, dv, valid)


def apply_motion_blur(image: GrayImage, flow: FlowField, exposure_fraction: float) -> GrayImage:
    """Per-pixel line blur along -flow, endpoint-inclusive, border-clamped."""
    if not 0.0 <= exposure_fraction <= 1.0:
        raise ValueError("exposure_fraction must lie in [0, 1]")
    if exposure_fraction == 0.0:
        return image
    out = _kernels.motion_blur(image.data, flow.du, flow.dv, float(exposure_fraction))
    return GrayImage(np.clip(out, 0.0, 1.0))


def apply_sensor_noise(image: GrayImage, config: AugmentConfig, rng: np.random.Generator) -> GrayImage:
    """Additive Gaussian noise on linearized intensities, then clip to [0, 1]."""
    lin = np.power(image.data, config.gamma)
    lin = lin + rng.normal(0.0, math.sqrt(config.noise_variance), size=lin.shape)
    out = np.power(np.maximum(lin, 0.0), 1.0 / config.gamma)
    return GrayImage(np.clip(out, 0.0, 1.0))


def make_episode(
    scene: Scene,
    trajectory: Trajectory,
    camera: PinholeCamera,
    augment: Optional[AugmentConfig] = None,
    seed: Optional[int] = None,
) -> List[SequenceFrame]:
    """Render a full episode with flow attached to every frame but the last.

    Blur uses each frame's own forward flow (the final frame stays sharp);
    noise draws come from a generator seeded by `seed` (default: scene.seed),
    so reruns are bit-identical.  Ground-truth flow always reflects the clean
    geometry.
    """
    if augment is None:
        augment = AugmentConfig(enable_blur=False, enable_noise=False)
    if seed is None:
        seed = scene.seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA06]))

    rendered = [render_frame(scene, pose, camera) for pose in trajectory.poses]
    depths = [d for _, d in rendered]
    flows = [
        gt_flow(scene, trajectory.poses[t], trajectory.poses[t + 1], camera,
                depth_t=depths[t], depth_t1=depths[t + 1])
        for t in range(len(trajectory.poses) - 1)
    ]

    exposure_fraction = min(1.0, augment.exposure_s * trajectory.fps)
    frames = []
    for t, (img, depth) in enumerate(rendered):
        out = img
        if augment.enable_blur and t < len(flows):
            out = apply_motion_blur(out, flows[t], exposure_fraction)
        if augment.enable_noise:
            out = apply_sensor_noise(out, augment, rng)
        frames.append(
            SequenceFrame(
                index=t,
                timestamp=t / trajectory.fps,
                image=out,
                gt_flow_to_next=flows[t] if t < len(flows) else None,
                pose=trajectory.poses[t],
                depth=depth,
            )
        )
    return frames
