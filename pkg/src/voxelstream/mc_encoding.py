"""Marching-Cubes block encoding, triangulation, mesh regions and LoDs.

An MC voxel compresses a 12-byte TSDF voxel down to 4 bytes: the cube index
of the cube whose origin corner is that voxel (1 byte) plus the voxel color
(3 bytes).  Index bit k is set when cube corner k (at offset ((k&1),
(k>>1)&1, (k>>2)&1) from the origin, in voxel units) lies inside the
surface, i.e. its fused tsdf is negative; a cube with any unobserved corner
gets index 0.  Indices 0 and 255 produce no triangles, so both are cut to
index 0 with color zeroed before hitting the wire.

Cubes on a block's positive faces read corners from the +1 neighbor
blocks.  Conversely, updating one TSDF block invalidates the MC content of
the block itself and its seven negative-direction neighbors; recomputation
always covers whole blocks so the mesh never cracks along block seams.

Triangulation places vertices at cube-edge midpoints and colors them with
the cube's origin-voxel color; no interpolation, which is what keeps the
representation both compact and neighbor-independent on the client.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from itertools import product
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .concurrent_hash import BlockKey
from .mc_tables import CASE_VERTEX_OFFSETS
from .voxel_model import BLOCK_EDGE, BLOCK_VOXELS, LOCAL_COORDS, TsdfBlock

MC_VOXEL_DTYPE = np.dtype([("index", "u1"), ("color", "u1", 3)])
assert MC_VOXEL_DTYPE.itemsize == 4

MC_BLOCK_BYTES = BLOCK_VOXELS * MC_VOXEL_DTYPE.itemsize  # 2048

MESH_REGION_EDGE = 15  # voxel blocks per mesh-block edge


class McVoxel(NamedTuple):
    index: int
    color: tuple[int, int, int]


class McBlock:
    """8x8x8 MC voxels, x-fastest; the unit streamed to exploration clients."""

    __slots__ = ("key", "index", "color")

    def __init__(
        self,
        key: BlockKey,
        index: Optional[np.ndarray] = None,
        color: Optional[np.ndarray] = None,
    ) -> None:
        self.key = key
        self.index = (
            np.zeros(BLOCK_VOXELS, dtype=np.uint8) if index is None else index
        )
        self.color = (
            np.zeros((BLOCK_VOXELS, 3), dtype=np.uint8) if color is None else color
        )

    def is_empty(self) -> bool:
        return not self.index.any()

    def to_bytes(self) -> bytes:
        rec = np.zeros(BLOCK_VOXELS, dtype=MC_VOXEL_DTYPE)
        rec["index"] = self.index
        rec["color"] = self.color
        return rec.tobytes()

    @classmethod
    def from_bytes(cls, key: BlockKey, raw: bytes) -> "McBlock":
        if len(raw) != MC_BLOCK_BYTES:
            raise ValueError(f"MC block payload must be {MC_BLOCK_BYTES} bytes")
        rec = np.frombuffer(raw, dtype=MC_VOXEL_DTYPE)
        return cls(key, rec["index"].copy(), rec["color"].copy())


def compute_mc_index(corners: Iterable[tuple[float, float]]) -> int:
    """Cube index from 8 (tsdf, weight) corner samples in wire corner order.

    Any unobserved corner (weight == 0) forces index 0 so no surface is
    hallucinated at observation boundaries.
    """
    corners = list(corners)
    if len(corners) != 8:
        raise ValueError("a cube has exactly 8 corners")
    index = 0
    for k, (tsdf, weight) in enumerate(corners):
        if weight <= 0:
            return 0
        if tsdf < 0:
            index |= 1 << k
    return index


def apply_cutoff(voxel: McVoxel) -> McVoxel:
    """Zero index and color for the two triangle-free cases (0 and 255)."""
    if voxel.index == 0 or voxel.index == 255:
        return McVoxel(0, (0, 0, 0))
    return voxel


def affected_mc_blocks(updated: BlockKey) -> list[BlockKey]:
    """The 8 MC blocks whose cubes read corners from an updated TSDF block:
    the block itself and its seven neighbors in negative direction."""
    x, y, z = updated
    return [
        (x + dx, y + dy, z + dz)
        for dx, dy, dz in product((0, -1), repeat=3)
    ]


def _corner_grids(
    key: BlockKey, tsdf_lookup: Callable[[BlockKey], Optional[TsdfBlock]]
) -> tuple[np.ndarray, np.ndarray, Optional[TsdfBlock]]:
    """9x9x9 tsdf and weight grids, axes [z, y, x]; absent data -> weight 0."""
    tsdf = np.zeros((9, 9, 9), dtype=np.float32)
    weight = np.zeros((9, 9, 9), dtype=np.float32)
    x, y, z = key
    center = None
    for dz, dy, dx in product((0, 1), repeat=3):
        blk = tsdf_lookup((x + dx, y + dy, z + dz))
        if blk is None:
            continue
        if dx == dy == dz == 0:
            center = blk
        b_tsdf = blk.tsdf.reshape(8, 8, 8)  # [z, y, x]
        b_weight = blk.weight.reshape(8, 8, 8)
        zs = slice(8, 9) if dz else slice(0, 8)
        ys = slice(8, 9) if dy else slice(0, 8)
        xs = slice(8, 9) if dx else slice(0, 8)
        zsrc = slice(0, 1) if dz else slice(0, 8)
        ysrc = slice(0, 1) if dy else slice(0, 8)
        xsrc = slice(0, 1) if dx else slice(0, 8)
        tsdf[zs, ys, xs] = b_tsdf[zsrc, ysrc, xsrc]
        weight[zs, ys, xs] = b_weight[zsrc, ysrc, xsrc]
    return tsdf, weight, center


def recompute_mc_block(
    key: BlockKey, tsdf_lookup: Callable[[BlockKey], Optional[TsdfBlock]]
) -> McBlock:
    """Full 512-voxel recompute of one MC block from the TSDF model.

    Deterministic: identical TSDF inputs yield byte-identical output.
    """
    center = tsdf_lookup(key)
    if center is None:
        # every cube's origin corner lives in this block, so all indices
        # would come out 0 anyway
        return McBlock(key)
    tsdf, weight, _ = _corner_grids(key, tsdf_lookup)

    inside = tsdf < 0
    observed = weight > 0
    index = np.zeros((8, 8, 8), dtype=np.uint16)
    all_observed = np.ones((8, 8, 8), dtype=bool)
    for k in range(8):
        dx, dy, dz = k & 1, (k >> 1) & 1, (k >> 2) & 1
        sub = (slice(dz, dz + 8), slice(dy, dy + 8), slice(dx, dx + 8))
        index |= inside[sub].astype(np.uint16) << k
        all_observed &= observed[sub]
    index[~all_observed] = 0
    index[index == 255] = 0  # cutoff: no triangles either way
    flat = index.reshape(BLOCK_VOXELS).astype(np.uint8)
    color = np.where((flat != 0)[:, None], center.color, 0).astype(np.uint8)
    return McBlock(key, flat, color)


@dataclass
class TriangleMesh:
    """Soup-style mesh: consecutive vertex triples form the triangles."""

    positions: np.ndarray  # (n, 3) float32 meters
    colors: np.ndarray  # (n, 3) uint8
    triangles: np.ndarray  # (n/3, 3) int32 indices

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(
            np.zeros((0, 3), dtype=np.float32),
            np.zeros((0, 3), dtype=np.uint8),
            np.zeros((0, 3), dtype=np.int32),
        )

    def triangle_count(self) -> int:
        return len(self.triangles)


@dataclass
class MeshConfig:
    voxel_size: float = 0.005
    # distance cutoffs (meters): full mesh below the first, then each point
    # LoD in turn; intervals are half-open so a distance exactly on a
    # threshold takes the coarser level
    mesh_limit: float = 5.0
    lod1_limit: float = 10.0
    lod2_limit: float = 20.0


class DetailLevel(IntEnum):
    MESH = 0
    LOD1 = 1  # one point per surface voxel
    LOD2 = 2  # one point per 2x2x2 voxel group
    LOD3 = 3  # one point per 4x4x4 voxel group


def choose_lod(distance_m: float, cfg: MeshConfig) -> DetailLevel:
    if distance_m < cfg.mesh_limit:
        return DetailLevel.MESH
    if distance_m < cfg.lod1_limit:
        return DetailLevel.LOD1
    if distance_m < cfg.lod2_limit:
        return DetailLevel.LOD2
    return DetailLevel.LOD3


def triangulate_block(mc: McBlock, cfg: MeshConfig) -> TriangleMesh:
    """Emit the case-table triangles of every surface voxel in the block.

    Vertices sit on cube-edge midpoints in world coordinates; each vertex
    inherits the cube's origin-voxel color verbatim.
    """
    surface = np.flatnonzero(mc.index)
    if surface.size == 0:
        return TriangleMesh.empty()
    voxel = cfg.voxel_size
    origin = np.asarray(mc.key, dtype=np.float64) * BLOCK_EDGE
    pos_chunks = []
    col_chunks = []
    for f in surface:
        case = int(mc.index[f])
        offs = CASE_VERTEX_OFFSETS[case]
        if len(offs) == 0:
            continue
        base = (origin + LOCAL_COORDS[f] + 0.5) * voxel
        pos_chunks.append(base + offs * voxel)
        col_chunks.append(np.broadcast_to(mc.color[f], (len(offs), 3)))
    if not pos_chunks:
        return TriangleMesh.empty()
    positions = np.concatenate(pos_chunks).astype(np.float32)
    colors = np.concatenate(col_chunks).astype(np.uint8)
    tris = np.arange(len(positions), dtype=np.int32).reshape(-1, 3)
    return TriangleMesh(positions, colors, tris)


@dataclass
class MeshBlock:
    """A 15^3-voxel-block region triangulated and decimated as one unit."""

    key: BlockKey  # block key // 15 (floor)
    mesh: TriangleMesh
    lod1: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8))
    )
    lod2: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8))
    )
    lod3: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8))
    )


def mesh_region_key(block_key: BlockKey) -> BlockKey:
    return (
        block_key[0] // MESH_REGION_EDGE,
        block_key[1] // MESH_REGION_EDGE,
        block_key[2] // MESH_REGION_EDGE,
    )


def _lod_points(
    coords: np.ndarray, colors: np.ndarray, group: int, voxel: float
) -> tuple[np.ndarray, np.ndarray]:
    """One point per occupied group^3 cell: center position, mean color."""
    if len(coords) == 0:
        return np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8)
    cells = np.floor_divide(coords, group)
    off = 1 << 20  # 21-bit fields: 3 of them fit a signed 64-bit int
    enc = ((cells[:, 0] + off) << 42) | ((cells[:, 1] + off) << 21) | (cells[:, 2] + off)
    order = np.argsort(enc, kind="stable")
    enc_sorted = enc[order]
    uniq, starts = np.unique(enc_sorted, return_index=True)
    sums = np.add.reduceat(colors[order].astype(np.float64), starts, axis=0)
    counts = np.diff(np.append(starts, len(enc_sorted)))
    mean_colors = np.rint(sums / counts[:, None]).astype(np.uint8)
    cx = (uniq >> 42) - off
    cy = ((uniq >> 21) & ((1 << 21) - 1)) - off
    cz = (uniq & ((1 << 21) - 1)) - off
    centers = (
        (np.stack([cx, cy, cz], axis=1).astype(np.float64) * group + group / 2.0)
        * voxel
    ).astype(np.float32)
    return centers, mean_colors


def build_mesh_block(
    region_key: BlockKey, blocks: Iterable[McBlock], cfg: MeshConfig
) -> MeshBlock:
    """Triangulate every member MC block and build the three point LoDs.

    blocks must all belong to the region (key // 15 == region_key); the
    caller collects them from its local model.
    """
    meshes = []
    coord_chunks = []
    color_chunks = []
    for blk in blocks:
        if mesh_region_key(blk.key) != region_key:
            raise ValueError(f"block {blk.key} outside mesh region {region_key}")
        mesh = triangulate_block(blk, cfg)
        if mesh.triangle_count():
            meshes.append(mesh)
        surface = np.flatnonzero(blk.index)
        if surface.size:
            origin = np.asarray(blk.key, dtype=np.int64) * BLOCK_EDGE
            coord_chunks.append(origin + LOCAL_COORDS[surface])
            color_chunks.append(blk.color[surface])

    if meshes:
        positions = np.concatenate([m.positions for m in meshes])
        colors = np.concatenate([m.colors for m in meshes])
        tris = np.arange(len(positions), dtype=np.int32).reshape(-1, 3)
        mesh = TriangleMesh(positions, colors, tris)
    else:
        mesh = TriangleMesh.empty()

    if coord_chunks:
        coords = np.concatenate(coord_chunks)
        cols = np.concatenate(color_chunks)
    else:
        coords = np.zeros((0, 3), np.int64)
        cols = np.zeros((0, 3), np.uint8)

    voxel = cfg.voxel_size
    lod1 = (
        ((coords.astype(np.float64) + 0.5) * voxel).astype(np.float32),
        cols.copy(),
    )
    return MeshBlock(
        key=region_key,
        mesh=mesh,
        lod1=lod1,
        lod2=_lod_points(coords, cols, 2, voxel),
        lod3=_lod_points(coords, cols, 4, voxel),
    )
