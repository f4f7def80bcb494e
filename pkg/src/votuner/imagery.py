"""Core image containers: grayscale rasters, pyramids, camera model, flow fields.

All intensities are stored as float64 in [0, 1]; 8-bit inputs are divided by
255 on load.  Containers are immutable after construction (arrays are set
non-writeable) so they can be shared freely across concurrent rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ImageTooSmall, OutOfBounds


class GrayImage:
    """Single-channel raster with normalized intensities in [0, 1]."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D intensity array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        arr.flags.writeable = False
        self.data = arr

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_uint8(cls, raw: np.ndarray) -> "GrayImage":
        return cls(np.asarray(raw, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.data * 255.0).astype(np.uint8)

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ImagePyramid:
    """Coarse-to-fine stack; level 0 is full resolution, each level halves."""

    levels: tuple

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def base(self) -> GrayImage:
        return self.levels[0]


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform: x_world = R(q) @ x_cam + t."""

    rotation: np.ndarray  # unit quaternion (x, y, z, w)
    translation: np.ndarray  # meters

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} deviates from 1 by more than 1e-9")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix of the camera-to-world quaternion."""
        x, y, z, w = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))


class FlowField:
    """Dense per-pixel displacement (du, dv) with a validity mask.

    Components are stored as float32 to match the on-disk flow format
    bit-for-bit on roundtrip.
    """

    __slots__ = ("du", "dv", "valid")

    def __init__(self, du: np.ndarray, dv: np.ndarray, valid: Optional[np.ndarray] = None):
        du = np.array(du, dtype=np.float32, order="C")
        dv = np.array(dv, dtype=np.float32, order="C")
        if du.shape != dv.shape or du.ndim != 2:
            raise ValueError("du/dv must be equal-shape 2-D arrays")
        if valid is None:
            valid = np.ones(du.shape, dtype=bool)
        valid = np.array(valid, dtype=bool, order="C")
        if valid.shape != du.shape:
            raise ValueError("valid mask shape mismatch")
        for a in (du, dv, valid):
            a.flags.writeable = False
        self.du = du
        self.dv = dv
        self.valid = valid

    @property
    def width(self) -> int:
        return self.du.shape[1]

    @property
    def height(self) -> int:
        return self.du.shape[0]


@dataclass
class SequenceFrame:
    index: int
    timestamp: float
    image: GrayImage
    gt_flow_to_next: Optional[FlowField] = None
    pose: Optional[Pose] = None
    depth: Optional[np.ndarray] = field(default=None, repr=False)


def build_pyramid(image: GrayImage, num_levels: int = 3) -> ImagePyramid:
    """Build a box-filtered half-resolution pyramid.

    Each level is the 2x2 average of its parent with odd trailing rows or
    columns truncated.  Raises ImageTooSmall if any level would have a
    dimension below 8 pixels.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    levels = [image]
    cur = image.data
    for _ in range(num_levels - 1):
        h2, w2 = cur.shape[0] // 2, cur.shape[1] // 2
        trimmed = cur[: 2 * h2, : 2 * w2]
        down = 0.25 * (
            trimmed[0::2, 0::2] + trimmed[0::2, 1::2] + trimmed[1::2, 0::2] + trimmed[1::2, 1::2]
        )
        cur = down
        levels.append(GrayImage(np.clip(down, 0.0, 1.0)))
    for lvl in levels:
        if lvl.width < 8 or lvl.height < 8:
            raise ImageTooSmall(
                f"pyramid level of size {lvl.width}x{lvl.height} is below the 8-pixel minimum"
            )
    return ImagePyramid(tuple(levels))


def bilinear_sample(image: GrayImage, x: float, y: float) -> float:
    """Sample intensity at subpixel (x, y); requires 0 <= x < width-1, 0 <= y < height-1."""
    w, h = image.width, image.height
    if not (0.0 <= x < w - 1 and 0.0 <= y < h - 1):
        raise OutOfBounds(f"sample point ({x}, {y}) outside [0, {w - 1}) x [0, {h - 1})")
    x0, y0 = int(x), int(y)
    fx, fy = x - x0, y - y0
    d = image.data
    return float(
        d[y0, x0] * (1 - fx) * (1 - fy)
        + d[y0, x0 + 1] * fx * (1 - fy)
        + d[y0 + 1, x0] * (1 - fx) * fy
        + d[y0 + 1, x0 + 1] * fx * fy
    )


def bilinear_grid(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling with border clamping (internal helper).

    Unlike :func:`bilinear_sample` this clamps coordinates into
    [0, size-1] so callers can sample right up to (and past) the border.
    """
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


def area_downsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact box-average resize: each output pixel averages its source rectangle.

    Implemented with an integral image so fractional box edges are handled
    exactly; used for observation thumbnails and texture statistics.
    """
    h, w = arr.shape
    if out_h > h or out_w > w:
        raise ValueError("area_downsample only shrinks images")
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0), axis=1)

    def box_sums(edges_y, edges_x):
        # Fractional rectangle sums via bilinear interpolation of the integral image.
        iy = np.clip(edges_y, 0, h)
        ix = np.clip(edges_x, 0, w)
        y0 = np.minimum(iy.astype(np.int64), h - 1)
        x0 = np.minimum(ix.astype(np.int64), w - 1)
        fy = iy - y0
        fx = ix - x0
        vy = (1 - fy)[:, None] * integral[y0][:, x0] + fy[:, None] * integral[y0 + 1][:, x0]
        vy2 = (1 - fy)[:, None] * integral[y0][:, x0 + 1] + fy[:, None] * integral[y0 + 1][:, x0 + 1]
        return (1 - fx)[None, :] * vy + fx[None, :] * vy2

    ey = np.linspace(0.0, h, out_h + 1)
    ex = np.linspace(0.0, w, out_w + 1)
    s = box_sums(ey, ex)
    sums = s[1:, 1:] - s[:-1, 1:] - s[1:, :-1] + s[:-1, :-1]
    areas = np.outer(np.diff(ey), np.diff(ex))
    return sums / areas
