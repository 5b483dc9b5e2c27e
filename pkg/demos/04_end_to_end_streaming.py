#!/usr/bin/env python3
"""Full pipeline in one process: server, reconstruction, two explorers.

One exploration client uses the random strategy; the other drops its
connection mid-run and reconnects with the same identity, receiving only
what it missed.  At the end both hold byte-identical copies of the
server's MC model.
"""

import time

from voxelstream import wire
from voxelstream.dataset import RoomScene, default_intrinsics, synthetic_frames
from voxelstream.exploration import EcConfig, ExplorationClient
from voxelstream.reconstruction import RcConfig, ReconstructionClient
from voxelstream.server import Server, ServerConfig
from voxelstream.voxel_model import FusionConfig

server = Server(ServerConfig(buckets=1 << 16, excess=1 << 16,
                             codec=wire.Codec.DEFLATE))
server.start(tcp=("127.0.0.1", 0))
print(f"server listening on 127.0.0.1:{server.tcp_port}")

rc = ReconstructionClient(
    RcConfig(fusion=FusionConfig(voxel_size=0.02, truncation=0.1),
             package_size=256, send_rate_hz=200,
             codec=wire.Codec.DEFLATE, speed=0.5)
)
rc.connect("127.0.0.1", server.tcp_port)

ecs = []
for name in ("steady", "flaky"):
    ec = ExplorationClient(EcConfig(request_rate_hz=60, max_blocks=256,
                                    voxel_size=0.02))
    ec.connect("127.0.0.1", server.tcp_port)
    ec.start()
    ecs.append((name, ec))

intr = default_intrinsics(160, 120)
scene = RoomScene(half_extent=(1.0, 0.8, 1.0))

import threading

rc_thread = threading.Thread(
    target=rc.run_sequence, args=(intr, synthetic_frames(scene, intr, 40, fps=30))
)
rc_thread.start()

time.sleep(1.5)
print("dropping the flaky client for 2 seconds...")
ecs[1][1].drop_connection()
time.sleep(2.0)
print("flaky client reconnecting (same id, no state discarded)")

rc_thread.join()
rc.drain(timeout=60)
deadline = time.time() + 30
while time.time() < deadline:
    pending = sum(s.stream.size() for s in server._exploration_sessions())
    if pending == 0 and rc.stream.size() == 0:
        time.sleep(1.0)
        break
    time.sleep(0.2)

server_keys = set(server.mc_map.snapshot_keys())
rc_rx, ec_tx = server.link_totals()
print(f"\nserver model: {len(server_keys)} MC blocks")
print(f"bytes rc->server {rc_rx}, server->ecs {ec_tx} "
      f"(ratio {ec_tx / rc_rx / len(ecs):.3f} per client)")
for name, ec in ecs:
    local = set(ec.model_keys())
    identical = local == server_keys and all(
        ec.mc_map.get(k).to_bytes() == server.mc_map.get(k) for k in server_keys
    )
    built = ec.rebuild_dirty(budget=1 << 20)
    print(f"{name:>7}: {len(local)} blocks, byte-identical={identical}, "
          f"{built} mesh regions built")

for _, ec in ecs:
    ec.stop()
rc.close()
server.stop()
