"""Sparse TSDF voxel-block model: allocation, fusion, retirement, deletion.

Blocks are 8x8x8 voxels addressed by an integer key (block coordinates in
units of one block edge).  Voxel storage is flat, x-fastest: linear index
x + 8y + 64z.  A voxel's sample point sits at (global_voxel + 0.5) *
voxel_size, where global_voxel = key * 8 + local.

Weight 0 means never observed; the tsdf value is meaningful only where
weight > 0.  On the wire one voxel is 12 bytes: f32 tsdf, f32 weight,
3 bytes RGB and 1 pad byte.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .concurrent_hash import BlockHashMap, BlockKey
from .geometry import CameraIntrinsics, Frustum, Pose, block_aabbs

BLOCK_EDGE = 8
BLOCK_VOXELS = BLOCK_EDGE ** 3

TSDF_VOXEL_DTYPE = np.dtype(
    [("tsdf", "<f4"), ("weight", "<f4"), ("color", "u1", 3), ("pad", "u1")]
)
assert TSDF_VOXEL_DTYPE.itemsize == 12

TSDF_BLOCK_BYTES = BLOCK_VOXELS * TSDF_VOXEL_DTYPE.itemsize  # 6144

# local voxel coordinates for each flat index, x-fastest
_idx = np.arange(BLOCK_VOXELS)
LOCAL_COORDS = np.stack(
    [_idx % BLOCK_EDGE, (_idx // BLOCK_EDGE) % BLOCK_EDGE, _idx // (BLOCK_EDGE ** 2)],
    axis=1,
).astype(np.int64)
del _idx


class TsdfBlock:
    """One 8x8x8 chunk of TSDF voxels plus its streaming bookkeeping."""

    __slots__ = ("key", "tsdf", "weight", "color", "updated", "visible")

    def __init__(self, key: BlockKey) -> None:
        self.key = key
        self.tsdf = np.zeros(BLOCK_VOXELS, dtype=np.float32)
        self.weight = np.zeros(BLOCK_VOXELS, dtype=np.float32)
        self.color = np.zeros((BLOCK_VOXELS, 3), dtype=np.uint8)
        self.updated = False  # received at least one fused observation
        self.visible = False  # inside the sensor frustum since last retirement

    def to_bytes(self) -> bytes:
        rec = np.zeros(BLOCK_VOXELS, dtype=TSDF_VOXEL_DTYPE)
        rec["tsdf"] = self.tsdf
        rec["weight"] = self.weight
        rec["color"] = self.color
        return rec.tobytes()

    @classmethod
    def from_bytes(cls, key: BlockKey, raw: bytes) -> "TsdfBlock":
        if len(raw) != TSDF_BLOCK_BYTES:
            raise ValueError(f"TSDF block payload must be {TSDF_BLOCK_BYTES} bytes")
        rec = np.frombuffer(raw, dtype=TSDF_VOXEL_DTYPE)
        blk = cls(key)
        blk.tsdf = rec["tsdf"].astype(np.float32)
        blk.weight = rec["weight"].astype(np.float32)
        blk.color = rec["color"].copy()
        blk.updated = True
        return blk


@dataclass
class FusionConfig:
    voxel_size: float = 0.005
    truncation: float = 0.060
    max_weight: float = 128.0
    visibility_margin_blocks: float = 2.0  # retirement slack beyond the frustum
    # pixel stride for allocation ray marching; safe above 1 when adjacent
    # rays diverge far less than a block edge at scene depth
    alloc_stride: int = 1

    def __post_init__(self) -> None:
        if self.truncation < 4 * self.voxel_size:
            raise ValueError("truncation must be at least 4 voxels")
        if self.alloc_stride < 1:
            raise ValueError("alloc_stride must be >= 1")

    @property
    def block_size(self) -> float:
        return BLOCK_EDGE * self.voxel_size

    @property
    def visibility_margin(self) -> float:
        return self.visibility_margin_blocks * self.block_size


# Points this close to a block face (in meters) also allocate the
# neighboring block, so segments running along a face touch both sides.
_BOUNDARY_EPS = 1e-6


def _segment_block_keys(points: np.ndarray, block_size: float) -> np.ndarray:
    """Unique block keys covered by sample points, boundary-inclusive."""
    g = points / block_size
    base = np.floor(g).astype(np.int64)
    frac = g - base
    tol = _BOUNDARY_EPS / block_size
    lo = frac < tol
    hi = frac > 1.0 - tol
    keys = [base]
    edgy = (lo | hi).any(axis=1)
    if edgy.any():
        base_e, lo_e, hi_e = base[edgy], lo[edgy], hi[edgy]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    m = np.ones(len(base_e), dtype=bool)
                    for axis, d in enumerate((dx, dy, dz)):
                        if d == -1:
                            m &= lo_e[:, axis]
                        elif d == 1:
                            m &= hi_e[:, axis]
                    if m.any():
                        keys.append(base_e[m] + np.array([dx, dy, dz]))
    stacked = np.concatenate(keys, axis=0)
    # scalar-encode for a fast unique; ±2^20 blocks of range is plenty
    off = 1 << 20
    enc = ((stacked[:, 0] + off) << 42) | ((stacked[:, 1] + off) << 21) | (
        stacked[:, 2] + off
    )
    enc = np.unique(enc)
    out = np.empty((len(enc), 3), dtype=np.int64)
    out[:, 0] = (enc >> 42) - off
    out[:, 1] = ((enc >> 21) & ((1 << 21) - 1)) - off
    out[:, 2] = (enc & ((1 << 21) - 1)) - off
    return out


class VoxelModel:
    """The reconstruction-side sparse TSDF model.

    The block map is the concurrent hash map, so fusion may run on several
    threads; visibility bookkeeping (retire_invisible) belongs to a single
    coordinator thread per frame.
    """

    def __init__(
        self,
        cfg: FusionConfig,
        bucket_count: int = 1 << 17,
        excess_capacity: int = 1 << 17,
    ) -> None:
        self.cfg = cfg
        self.blocks = BlockHashMap(bucket_count, excess_capacity)
        self._visible: set[BlockKey] = set()
        self._visible_lock = threading.Lock()

    # -- allocation ---------------------------------------------------------

    def allocate_blocks(
        self, depth: np.ndarray, pose: Pose, intrinsics: CameraIntrinsics
    ) -> list[BlockKey]:
        """Ensure blocks exist along every valid ray segment [d-mu, d+mu].

        Returns only the newly created keys; re-running the same frame
        returns nothing.
        """
        cfg = self.cfg
        s = cfg.alloc_stride
        depth_s = depth[::s, ::s] if s > 1 else depth
        valid = depth_s > 0
        if not valid.any():
            return []
        rays = intrinsics.pixel_rays()[::s, ::s][valid]
        d = depth_s[valid].astype(np.float64)
        z0 = np.maximum(d - cfg.truncation, cfg.voxel_size)
        z1 = d + cfg.truncation
        steps = int(np.ceil(2 * cfg.truncation / cfg.voxel_size)) + 1
        ts = np.linspace(0.0, 1.0, steps)
        zs = z0[:, None] + (z1 - z0)[:, None] * ts[None, :]
        pts = rays[:, None, :] * zs[:, :, None]
        world = pose.transform(pts.reshape(-1, 3))
        cand = _segment_block_keys(world, cfg.block_size)

        new_keys: list[BlockKey] = []
        for row in cand:
            key = (int(row[0]), int(row[1]), int(row[2]))
            _, created = self.blocks.get_or_create(key, lambda k=key: TsdfBlock(k))
            if created:
                new_keys.append(key)
        return new_keys

    # -- fusion --------------------------------------------------------------

    def integrate_frame(
        self,
        depth: np.ndarray,
        color: np.ndarray,
        pose: Pose,
        intrinsics: CameraIntrinsics,
    ) -> list[BlockKey]:
        """Fuse one registered RGB-D frame into all allocated in-view blocks.

        Returns the keys that received at least one voxel update; those are
        also marked visible for the retirement pass.
        """
        cfg = self.cfg
        keys = self.blocks.snapshot_keys()
        if not keys:
            return []
        frustum = self.sensor_frustum(pose, intrinsics, margin=cfg.block_size)
        karr = np.asarray(keys, dtype=np.int64)
        mins, maxs = block_aabbs(karr, cfg.block_size)
        inview = frustum.intersects_aabbs(mins, maxs)
        cand_keys = [keys[i] for i in np.flatnonzero(inview)]
        if not cand_keys:
            return []
        karr = karr[inview]

        # coarse rejection: a block whose center is far outside the
        # truncation band of the observed depth cannot receive updates
        centers = (karr + 0.5) * cfg.block_size
        ccam = pose.inverse_transform(centers)
        cz = ccam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            cu = np.rint(intrinsics.fx * ccam[:, 0] / cz + intrinsics.cx)
            cv = np.rint(intrinsics.fy * ccam[:, 1] / cz + intrinsics.cy)
        inside = (
            (cz > 0)
            & (cu >= 0)
            & (cu < intrinsics.width)
            & (cv >= 0)
            & (cv < intrinsics.height)
        )
        cui = np.clip(cu, 0, intrinsics.width - 1).astype(np.int64)
        cvi = np.clip(cv, 0, intrinsics.height - 1).astype(np.int64)
        cd = depth[cvi, cui]
        reach = cfg.truncation + cfg.block_size * np.sqrt(3.0)
        rejectable = inside & (cd > 0) & (np.abs(cd - cz) > reach)
        keep = ~rejectable
        if not keep.any():
            return []
        cand_keys = [k for k, kp in zip(cand_keys, keep) if kp]
        karr = karr[keep]

        origins = karr * BLOCK_EDGE
        coords = (
            (origins[:, None, :] + LOCAL_COORDS[None] + 0.5) * cfg.voxel_size
        ).astype(np.float32)
        rot = pose.rotation.astype(np.float32)
        trans = pose.translation.astype(np.float32)
        cam = (coords.reshape(-1, 3) - trans) @ rot
        cam = cam.reshape(len(cand_keys), BLOCK_VOXELS, 3)
        z = cam[:, :, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(intrinsics.fx * cam[:, :, 0] / z + intrinsics.cx).astype(np.int32)
            v = np.rint(intrinsics.fy * cam[:, :, 1] / z + intrinsics.cy).astype(np.int32)
        ok = (
            (z > 0)
            & (u >= 0)
            & (u < intrinsics.width)
            & (v >= 0)
            & (v < intrinsics.height)
        )
        ui = np.clip(u, 0, intrinsics.width - 1)
        vi = np.clip(v, 0, intrinsics.height - 1)
        d = depth[vi, ui]
        sdf = d - z
        ok &= (d > 0) & (sdf >= -cfg.truncation)
        obs = np.clip(sdf / cfg.truncation, -1.0, 1.0)
        sample = color[vi, ui].astype(np.float32)

        touched: list[BlockKey] = []
        for i, key in enumerate(cand_keys):
            m = ok[i]
            if not m.any():
                continue
            blk = self.blocks.get(key)
            if blk is None:
                continue
            w = blk.weight[m]
            wn = w + 1.0
            blk.tsdf[m] = (blk.tsdf[m] * w + obs[i][m].astype(np.float32)) / wn
            blk.color[m] = np.rint(
                (blk.color[m].astype(np.float32) * w[:, None] + sample[i][m])
                / wn[:, None]
            ).astype(np.uint8)
            blk.weight[m] = np.minimum(wn, cfg.max_weight)
            blk.updated = True
            blk.visible = True
            touched.append(key)
        with self._visible_lock:
            self._visible.update(touched)
        return touched

    # -- visibility ----------------------------------------------------------

    def sensor_frustum(
        self,
        pose: Pose,
        intrinsics: CameraIntrinsics,
        near: float = 0.05,
        far: float = 20.0,
        margin: float | None = None,
    ) -> Frustum:
        if margin is None:
            margin = self.cfg.visibility_margin
        return Frustum(pose, intrinsics, near=near, far=far, margin=margin)

    def retire_invisible(self, frustum: Frustum) -> list[BlockKey]:
        """Blocks that were visible and updated but left the padded frustum.

        They are unmarked; if the camera returns and updates them again
        they become visible once more and will retire (and re-stream)
        again, which is correct.
        """
        with self._visible_lock:
            vis = list(self._visible)
        if not vis:
            return []
        karr = np.asarray(vis, dtype=np.int64)
        mins, maxs = block_aabbs(karr, self.cfg.block_size)
        still = frustum.intersects_aabbs(mins, maxs)
        retired = [vis[i] for i in np.flatnonzero(~still)]
        out: list[BlockKey] = []
        with self._visible_lock:
            for key in retired:
                blk = self.blocks.get(key)
                if blk is None or not blk.updated:
                    self._visible.discard(key)
                    continue
                blk.visible = False
                self._visible.discard(key)
                out.append(key)
        return out

    def visible_updated_keys(self) -> list[BlockKey]:
        """Currently visible blocks that carry fused data (prefetch source)."""
        with self._visible_lock:
            vis = list(self._visible)
        out = []
        for key in vis:
            blk = self.blocks.get(key)
            if blk is not None and blk.updated:
                out.append(key)
        return out

    # -- deletion -------------------------------------------------------------

    def delete_blocks(self, keys) -> int:
        """Drop blocks (reset support); absent keys are ignored."""
        n = 0
        with self._visible_lock:
            for key in keys:
                if self.blocks.remove(key):
                    n += 1
                self._visible.discard(key)
        return n

    def keys(self) -> list[BlockKey]:
        return self.blocks.snapshot_keys()

    def get_block(self, key: BlockKey) -> TsdfBlock | None:
        return self.blocks.get(key)
