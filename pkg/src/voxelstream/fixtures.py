"""Generate the checked-in protocol fixture corpus shared with the viewer.

Writes binary wire frames plus a JSON manifest of expected decode results
(keys, payload digests, triangulation vertex offsets) under
fixtures/protocol/.  Any client implementation that decodes the frames to
the same digests and derives the same per-case vertex offsets renders the
same geometry.

Run as:  python -m voxelstream.fixtures [out_dir]
"""

from __future__ import annotations

import hashlib
import json
import pathlib
import sys

import numpy as np

from . import wire
from .dataset import SphereScene, default_intrinsics, synthetic_frames
from .mc_encoding import recompute_mc_block
from .mc_tables import CASE_VERTEX_OFFSETS
from .voxel_model import FusionConfig, VoxelModel


def build_model_blocks(voxel: float = 0.01) -> list[tuple[tuple[int, int, int], bytes]]:
    """A small fused sphere as (key, mc_payload) pairs, deterministic."""
    scene = SphereScene(radius=0.4, orbit_radius=1.4)
    intr = default_intrinsics(80, 60)
    model = VoxelModel(FusionConfig(voxel_size=voxel, truncation=0.06),
                       bucket_count=1 << 13, excess_capacity=1 << 13)
    for frame in synthetic_frames(scene, intr, 8):
        model.allocate_blocks(frame.depth, frame.pose, intr)
        model.integrate_frame(frame.depth, frame.color, frame.pose, intr)
    out = []
    for key in sorted(model.keys()):
        mc = recompute_mc_block(key, model.get_block)
        out.append((key, mc.to_bytes()))
    return out


def generate(out_dir: str) -> dict:
    root = pathlib.Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"frames": [], "cases": None, "model_blocks": 0}

    blocks = build_model_blocks()
    manifest["model_blocks"] = len(blocks)

    def add_frame(name: str, msg, codec: int, expect: dict) -> None:
        frame = wire.encode_message(msg, codec)
        (root / name).write_bytes(frame)
        entry = {"file": name, "codec": int(codec),
                 "type": int(wire._TYPE_OF[type(msg)])}
        entry.update(expect)
        manifest["frames"].append(entry)

    # MC batches: empty, one block, many blocks, negative keys, both codecs
    def batch_expect(pairs):
        return {
            "keys": [list(k) for k, _ in pairs],
            "payload_sha256": [hashlib.sha256(raw).hexdigest() for _, raw in pairs],
        }

    add_frame("mc_empty_c0.bin", wire.McBatch([]), 0, batch_expect([]))
    one = blocks[:1]
    add_frame("mc_one_c0.bin", wire.McBatch(one), 0, batch_expect(one))
    add_frame("mc_one_c1.bin", wire.McBatch(one), 1, batch_expect(one))
    many = blocks[:64]
    add_frame("mc_many_c0.bin", wire.McBatch(many), 0, batch_expect(many))
    add_frame("mc_many_c1.bin", wire.McBatch(many), 1, batch_expect(many))
    neg = [((-3, -1, -7), blocks[0][1]), ((2, -5, 12), blocks[1][1])]
    add_frame("mc_negative_keys_c1.bin", wire.McBatch(neg), 1, batch_expect(neg))

    add_frame(
        "hello_ack_c0.bin",
        wire.HelloAck(0, 0.01, 8, 4242),
        0,
        {"status": 0, "voxel_size": 0.01, "block_edge": 8, "pending": 4242},
    )
    add_frame(
        "delete_c0.bin",
        wire.DeleteBlocks([(1, 2, 3), (-4, -5, -6)]),
        0,
        {"keys": [[1, 2, 3], [-4, -5, -6]]},
    )
    pose = tuple(float(x) for x in
                 (1, 0, 0, 0, 1, 0, 0, 0, 1, 0.25, -0.5, 1.5))
    add_frame(
        "pose_broadcast_c0.bin",
        wire.PoseBroadcast([(bytes(range(16)), 1, pose)]),
        0,
        {"entry_count": 1, "role": 1, "pose": list(pose)},
    )
    add_frame(
        "stats_c0.bin",
        wire.Stats(0, model_blocks=len(blocks), pending=7, time_us=123456),
        0,
        {"model_blocks": len(blocks), "pending": 7},
    )
    pixels = bytes((i * 37) % 256 for i in range(8 * 6 * 3))
    add_frame(
        "texture_c1.bin",
        wire.TextureImage(pose, (80.0, 80.0, 40.0, 30.0), 8, 6, pixels),
        1,
        {"width": 8, "height": 6,
         "pixels_sha256": hashlib.sha256(pixels).hexdigest()},
    )

    # triangulation vertex offsets for every cube index, in cube units
    manifest["cases"] = [
        np.asarray(offs, dtype=np.float32).reshape(-1).tolist()
        for offs in CASE_VERTEX_OFFSETS
    ]

    # a complete model stream for reconnect experiments
    full = wire.encode_message(wire.McBatch(blocks), 1)
    (root / "model_full_c1.bin").write_bytes(full)
    manifest["model_file"] = "model_full_c1.bin"
    manifest["model_sha256"] = hashlib.sha256(
        b"".join(raw for _, raw in blocks)
    ).hexdigest()

    (root / "manifest.json").write_text(json.dumps(manifest))
    return manifest


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "fixtures/protocol"
    m = generate(out)
    print(f"wrote {len(m['frames'])} frames + case table "
          f"({m['model_blocks']} model blocks) to {out}")
