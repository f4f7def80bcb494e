"""Bit-exact sequence I/O: image files, Middlebury .flo flow, TUM pose files.

Directory layout of a stored sequence:

    frame_000000.png   (or .pgm, 8-bit grayscale, zero-padded indices)
    flow_000000.flo    (optional; flow from frame i to frame i+1)
    poses.txt          (optional; one "timestamp tx ty tz qx qy qz qw" line per frame)
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image as PilImage

from .errors import CorruptFlow, MalformedPoseLine, MissingFrame
from .imagery import FlowField, GrayImage, Pose, SequenceFrame

FLO_MAGIC = b"PIEH"
# Middlebury convention: components at or above this magnitude mark invalid pixels.
FLO_UNKNOWN = 1e9
_FRAME_RE = re.compile(r"^frame_(\d{6})\.(png|pgm)$")

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def write_image(path: Path, image: GrayImage) -> None:
    path = Path(path)
    raw = image.to_uint8()
    if path.suffix == ".pgm":
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (image.width, image.height))
            f.write(raw.tobytes())
    else:
        PilImage.fromarray(raw, mode="L").save(path)


def read_image(path: Path) -> GrayImage:
    path = Path(path)
    if path.suffix == ".pgm":
        return GrayImage.from_uint8(_read_pgm(path))
    img = PilImage.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        w = np.array(LUMA_WEIGHTS, dtype=np.float64)
        gray = arr[..., :3].astype(np.float64) @ w
        return GrayImage(np.clip(gray / 255.0, 0.0, 1.0))
    return GrayImage.from_uint8(arr)


def _read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(data, pos)
        if m is None:
            raise ValueError(f"truncated PGM header in {path}")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            fields.append(tok)
    if fields[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM (P5) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, got maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w)


def write_flo(path: Path, flow: FlowField) -> None:
    """Write Middlebury .flo: magic, int32 width/height, interleaved (du, dv) float32 LE."""
    du = flow.du.copy()
    dv = flow.dv.copy()
    du[~flow.valid] = 1e10
    dv[~flow.valid] = 1e10
    inter = np.empty((flow.height, flow.width, 2), dtype="<f4")
    inter[..., 0] = du
    inter[..., 1] = dv
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", flow.width, flow.height))
        f.write(inter.tobytes())


def read_flo(path: Path) -> FlowField:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLO_MAGIC:
            raise CorruptFlow(f"{path}: bad magic {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise CorruptFlow(f"{path}: truncated header")
        w, h = struct.unpack("<ii", header)
        if w <= 0 or h <= 0:
            raise CorruptFlow(f"{path}: nonsensical dimensions {w}x{h}")
        payload = f.read()
    expected = 2 * w * h * 4
    if len(payload) != expected:
        raise CorruptFlow(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    inter = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    du, dv = inter[..., 0], inter[..., 1]
    valid = (np.abs(du) < FLO_UNKNOWN) & (np.abs(dv) < FLO_UNKNOWN)
    return FlowField(du, dv, valid)


def write_poses(path: Path, timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            tx, ty, tz = pose.translation
            qx, qy, qz, qw = pose.rotation
            f.write(f"{ts!r} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}\n")


def read_poses(path: Path) -> List[tuple]:
    """Read TUM trajectory lines; returns [(timestamp, Pose), ...]."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedPoseLine(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise MalformedPoseLine(f"{path}:{lineno}: {exc}") from None
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            q = np.array([qx, qy, qz, qw])
            n = np.linalg.norm(q)
            if n == 0:
                raise MalformedPoseLine(f"{path}:{lineno}: zero quaternion")
            out.append((ts, Pose(q / n, np.array([tx, ty, tz]))))
    return out


def save_sequence(directory: Path, frames: Sequence[SequenceFrame], image_format: str = "png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        write_image(directory / f"frame_{fr.index:06d}.{image_format}", fr.image)
        if fr.gt_flow_to_next is not None:
            write_flo(directory / f"flow_{fr.index:06d}.flo", fr.gt_flow_to_next)
    if any(fr.pose is not None for fr in frames):
        ts = [fr.timestamp for fr in frames]
        poses = [fr.pose if fr.pose is not None else Pose.identity() for fr in frames]
        write_poses(directory / "poses.txt", ts, poses)


def load_sequence(directory: Path, fps: float = 30.0) -> List[SequenceFrame]:
    """Load a stored sequence, attaching flow and poses where present.

    Frame indices must be contiguous; a gap raises MissingFrame.  Timestamps
    come from poses.txt when present, otherwise index / fps.
    """
    directory = Path(directory)
    found = {}
    for p in sorted(directory.iterdir()):
        m = _FRAME_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise MissingFrame(f"no frame_NNNNNN images in {directory}")
    indices = sorted(found)
    lo, hi = indices[0], indices[-1]
    missing = sorted(set(range(lo, hi + 1)) - set(indices))
    if missing:
        raise MissingFrame(f"gap in frame numbering at index {missing[0]} in {directory}")

    pose_path = directory / "poses.txt"
    poses: Optional[list] = read_poses(pose_path) if pose_path.exists() else None
    if poses is not None and len(poses) != len(indices):
        raise MalformedPoseLine(
            f"{pose_path}: {len(poses)} pose lines for {len(indices)} frames"
        )

    frames = []
    for k, idx in enumerate(indices):
        image = read_image(found[idx])
        flow_path = directory / f"flow_{idx:06d}.flo"
        flow = read_flo(flow_path) if flow_path.exists() else None
        if poses is not None:
            ts, pose = poses[k]
        else:
            ts, pose = idx / fps, None
        frames.append(SequenceFrame(index=idx, timestamp=ts, image=image, gt_flow_to_next=flow, pose=pose))
    return frames
