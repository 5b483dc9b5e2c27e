"""RGB-D sequence replay format and synthetic scene generators.

File layout (little-endian), magic "VCSEQ1":

    magic        6 bytes
    intrinsics   fx, fy, cx, cy, near, far as f32; width, height as u32
    per frame:
      timestamp  u64 microseconds
      pose       12 x f32, row-major rotation then translation (cam-to-world)
      w, h       u32 each (must match the header)
      depth      w*h f32 meters, 0 = invalid
      color      w*h*3 bytes RGB

The synthetic generators produce ground-truth-posed frames analytically:
"room" ray-casts the inside of a colored box, "sphere" a single sphere
(rays that miss return invalid depth).  Both exist so experiments are
reproducible without sensor recordings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .geometry import CameraIntrinsics, Pose

MAGIC = b"VCSEQ1"
_HEADER = struct.Struct("<6f2I")
_FRAME_HEAD = struct.Struct("<Q12f2I")


@dataclass
class Frame:
    timestamp_us: int
    pose: Pose
    depth: np.ndarray  # (h, w) float32 meters
    color: np.ndarray  # (h, w, 3) uint8


def write_sequence(
    path: str,
    intrinsics: CameraIntrinsics,
    frames: Iterable[Frame],
    near: float = 0.05,
    far: float = 20.0,
) -> int:
    """Stream frames to a sequence file; returns the frame count."""
    n = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            _HEADER.pack(
                intrinsics.fx,
                intrinsics.fy,
                intrinsics.cx,
                intrinsics.cy,
                near,
                far,
                intrinsics.width,
                intrinsics.height,
            )
        )
        for frame in frames:
            _write_frame(f, intrinsics, frame)
            n += 1
    return n


def _write_frame(f: BinaryIO, intrinsics: CameraIntrinsics, frame: Frame) -> None:
    h, w = frame.depth.shape
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise ValueError("frame size does not match header intrinsics")
    f.write(
        _FRAME_HEAD.pack(frame.timestamp_us, *frame.pose.to_floats(), w, h)
    )
    f.write(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(frame.color, dtype=np.uint8).tobytes())


def read_sequence(path: str) -> tuple[CameraIntrinsics, Iterator[Frame]]:
    """Open a sequence; returns the intrinsics and a lazy frame iterator."""
    f = open(path, "rb")
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        f.close()
        raise ValueError(f"not a VCSEQ1 file: magic {magic!r}")
    vals = _HEADER.unpack(f.read(_HEADER.size))
    fx, fy, cx, cy, _near, _far, width, height = vals
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

    def frames() -> Iterator[Frame]:
        try:
            while True:
                head = f.read(_FRAME_HEAD.size)
                if not head:
                    return
                if len(head) < _FRAME_HEAD.size:
                    raise ValueError("truncated frame header")
                parts = _FRAME_HEAD.unpack(head)
                ts = parts[0]
                pose = Pose.from_floats(parts[1:13])
                w, h = parts[13], parts[14]
                if (w, h) != (width, height):
                    raise ValueError("frame size differs from header")
                depth = np.frombuffer(f.read(w * h * 4), dtype="<f4").reshape(h, w)
                color = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
                yield Frame(ts, pose, depth.copy(), color.copy())
        finally:
            f.close()

    return intr, frames()


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

_FACE_COLORS = np.array(
    [
        (196, 72, 60),  # -x wall
        (60, 150, 196),  # +x wall
        (90, 170, 90),  # -y (up, with image-down = +y world)
        (180, 180, 170),  # +y floor
        (200, 170, 70),  # -z wall
        (150, 90, 180),  # +z wall
    ],
    dtype=np.float64,
)


@dataclass
class RoomScene:
    """Interior of an axis-aligned box with per-wall colors and a checker."""

    half_extent: tuple[float, float, float] = (1.2, 0.9, 1.2)
    checker: float = 0.25  # meters per checker cell

    def render(self, pose: Pose, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
        dirs = intrinsics.pixel_rays().reshape(-1, 3) @ pose.rotation.T
        o = pose.translation
        he = np.asarray(self.half_extent)
        with np.errstate(divide="ignore"):
            bound = np.where(dirs > 0, he[None, :], -he[None, :])
            t_axis = (bound - o[None, :]) / dirs
        t_axis[~np.isfinite(t_axis)] = np.inf
        face_axis = np.argmin(t_axis, axis=1)
        t = t_axis[np.arange(len(dirs)), face_axis]
        hit = o[None, :] + dirs * t[:, None]
        face = face_axis * 2 + (dirs[np.arange(len(dirs)), face_axis] > 0)
        base = _FACE_COLORS[face]
        cells = np.floor(hit / self.checker).astype(np.int64)
        parity = (cells.sum(axis=1) & 1).astype(np.float64)
        shade = 0.75 + 0.25 * parity
        color = np.clip(base * shade[:, None], 0, 255).astype(np.uint8)
        h, w = intrinsics.height, intrinsics.width
        # rays have camera z = 1, so the ray parameter is the z-depth
        return (
            t.reshape(h, w).astype(np.float32),
            color.reshape(h, w, 3),
        )

    def poses(self, count: int) -> list[Pose]:
        """Spin in place at the room center, nodding to sweep floor/ceiling."""
        out = []
        for i in range(count):
            yaw = 2 * np.pi * i / count
            pitch = 0.55 * np.sin(4 * np.pi * i / count)
            fwd = np.array(
                [
                    np.cos(pitch) * np.cos(yaw),
                    np.sin(pitch),
                    np.cos(pitch) * np.sin(yaw),
                ]
            )
            out.append(Pose.look_at((0.0, 0.0, 0.0), fwd))
        return out


@dataclass
class SphereScene:
    """A single colored sphere at the origin; background is invalid depth."""

    radius: float = 0.5
    orbit_radius: float = 1.6
    color: tuple[int, int, int] = (200, 60, 60)

    def render(self, pose: Pose, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
        dirs = intrinsics.pixel_rays().reshape(-1, 3) @ pose.rotation.T
        o = pose.translation
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * dirs @ o
        c = float(o @ o) - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        t = np.zeros(len(dirs))
        t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
        t[t <= 0] = 0.0
        h, w = intrinsics.height, intrinsics.width
        depth = t.reshape(h, w).astype(np.float32)
        color = np.zeros((h, w, 3), dtype=np.uint8)
        color[depth > 0] = self.color
        return depth, color

    def poses(self, count: int) -> list[Pose]:
        out = []
        for i in range(count):
            ang = 2 * np.pi * i / count
            eye = np.array(
                [
                    self.orbit_radius * np.cos(ang),
                    0.4 * np.sin(2 * ang),
                    self.orbit_radius * np.sin(ang),
                ]
            )
            out.append(Pose.look_at(eye, (0.0, 0.0, 0.0)))
        return out


def make_scene(name: str, **kwargs):
    if name == "room":
        return RoomScene(**kwargs)
    if name == "sphere":
        return SphereScene(**kwargs)
    raise ValueError(f"unknown synthetic scene {name!r}")


def default_intrinsics(width: int = 240, height: int = 180) -> CameraIntrinsics:
    f = width * 1.0  # ~53 degree horizontal field of view
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2, cy=height / 2,
                            width=width, height=height)


def synthetic_frames(
    scene, intrinsics: CameraIntrinsics, count: int, fps: float = 30.0
) -> Iterator[Frame]:
    poses = scene.poses(count)
    for i, pose in enumerate(poses):
        depth, color = scene.render(pose, intrinsics)
        yield Frame(int(i * 1e6 / fps), pose, depth, color)
