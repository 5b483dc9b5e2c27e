"""Live multi-client streaming of sparse voxel-block reconstructions.

A reconstruction client fuses posed RGB-D frames into a sparse TSDF
voxel-block model and streams retired blocks to a server; the server
re-encodes them into compact Marching-Cubes-index blocks and manages a
deduplicating pending set per exploration client; exploration clients
drain those sets at their own rate and triangulate locally.  Everything
concurrent runs on the guaranteed hash map/set in concurrent_hash.
"""

from .concurrent_hash import (
    BlockHashMap,
    BlockHashSet,
    BlockKey,
    CapacityExhausted,
    FreeListStack,
    hash_key,
)
from .geometry import CameraIntrinsics, Frustum, Pose, frustum_intersects_block
from .mc_encoding import (
    McBlock,
    McVoxel,
    MeshBlock,
    MeshConfig,
    TriangleMesh,
    affected_mc_blocks,
    apply_cutoff,
    build_mesh_block,
    choose_lod,
    compute_mc_index,
    recompute_mc_block,
    triangulate_block,
)
from .voxel_model import BLOCK_EDGE, FusionConfig, TsdfBlock, VoxelModel

__all__ = [
    "BLOCK_EDGE",
    "BlockHashMap",
    "BlockHashSet",
    "BlockKey",
    "CameraIntrinsics",
    "CapacityExhausted",
    "FreeListStack",
    "Frustum",
    "FusionConfig",
    "McBlock",
    "McVoxel",
    "MeshBlock",
    "MeshConfig",
    "Pose",
    "TriangleMesh",
    "TsdfBlock",
    "VoxelModel",
    "affected_mc_blocks",
    "apply_cutoff",
    "build_mesh_block",
    "choose_lod",
    "compute_mc_index",
    "frustum_intersects_block",
    "hash_key",
    "recompute_mc_block",
    "triangulate_block",
]

__version__ = "0.1.0"
