"""Camera geometry: poses, pinhole intrinsics, and frustum-vs-block tests.

Conventions: camera looks along +z with x right and y down (pixel v grows
downward); poses are camera-to-world; depth images store camera-z distance
in meters with 0 marking an invalid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3,3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        det = float(np.linalg.det(self.rotation))
        if abs(det - 1.0) > 1e-5:
            raise ValueError(f"rotation determinant {det} not within 1e-5 of 1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """Pose whose +z axis points from eye toward target.

        Default up is -y world so that image-down (+y camera) maps to +y
        world, keeping synthetic scenes right-side-up.
        """
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(fwd)
        if n == 0:
            raise ValueError("eye and target coincide")
        fwd = fwd / n
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(upv, fwd)
        rn = np.linalg.norm(right)
        if rn < 1e-9:  # forward parallel to up; pick another up
            upv = np.array([1.0, 0.0, 0.0])
            right = np.cross(upv, fwd)
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return cls(rot, eye)

    def to_floats(self) -> list[float]:
        """12 floats, row-major rotation then translation (the wire layout)."""
        return [*self.rotation.reshape(-1).tolist(), *self.translation.tolist()]

    @classmethod
    def from_floats(cls, vals) -> "Pose":
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != (12,):
            raise ValueError("pose needs exactly 12 floats")
        return cls(vals[:9].reshape(3, 3), vals[9:])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-space points -> world."""
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World points -> camera space."""
        return (points - self.translation) @ self.rotation


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def pixel_rays(self) -> np.ndarray:
        """(height, width, 3) unnormalized camera-space ray directions (z=1)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)],
            axis=-1,
        )


@dataclass
class Frustum:
    """View volume for visibility tests, padded outward by margin meters."""

    pose: Pose
    intrinsics: CameraIntrinsics
    near: float
    far: float
    margin: float = 0.0
    _planes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        self._planes = self._build_planes()

    def _build_planes(self) -> np.ndarray:
        """(6,4) rows (nx,ny,nz,d); inward normals, n.p + d >= 0 means inside."""
        intr = self.intrinsics
        corners = np.array(
            [
                [(0 - intr.cx) / intr.fx, (0 - intr.cy) / intr.fy, 1.0],
                [(intr.width - intr.cx) / intr.fx, (0 - intr.cy) / intr.fy, 1.0],
                [(intr.width - intr.cx) / intr.fx, (intr.height - intr.cy) / intr.fy, 1.0],
                [(0 - intr.cx) / intr.fx, (intr.height - intr.cy) / intr.fy, 1.0],
            ]
        )
        rays = corners @ self.pose.rotation.T  # world directions, corner order TL TR BR BL
        origin = self.pose.translation
        fwd = self.pose.rotation[:, 2]

        planes = []

        def plane(normal, point):
            normal = normal / np.linalg.norm(normal)
            planes.append([*normal, -float(normal @ point)])

        plane(fwd, origin + self.near * fwd)
        plane(-fwd, origin + self.far * fwd)
        # Side planes through the origin; adjacent corner rays in clockwise
        # image order (TL,TR,BR,BL) crossed so the normals point inward.
        for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
            plane(np.cross(rays[a], rays[b]), origin)
        return np.asarray(planes, dtype=np.float64)

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        d = pts @ self._planes[:, :3].T + self._planes[:, 3]
        return (d >= -self.margin).all(axis=1)

    def intersects_aabbs(self, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
        """Conservative test for N boxes; True may be a false positive."""
        mins = np.atleast_2d(mins)
        maxs = np.atleast_2d(maxs)
        ok = np.ones(len(mins), dtype=bool)
        for n in self._planes:
            pvert = np.where(n[:3] >= 0, maxs, mins)
            ok &= pvert @ n[:3] + n[3] >= -self.margin
        return ok


def block_aabbs(keys: np.ndarray, block_size: float) -> tuple[np.ndarray, np.ndarray]:
    """World AABBs of voxel blocks; keys is (N,3) int."""
    mins = np.asarray(keys, dtype=np.float64) * block_size
    return mins, mins + block_size


def frustum_intersects_block(frustum: Frustum, key, block_size: float) -> bool:
    """Conservative single-block visibility (false negatives never occur)."""
    mins, maxs = block_aabbs(np.asarray([key]), block_size)
    return bool(frustum.intersects_aabbs(mins, maxs)[0])
