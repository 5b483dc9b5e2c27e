"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (run with -s to see them live).  The
bandwidth criteria run a real room scene through the full socket pipeline;
the hash criteria run the million-op oracle workloads; the remaining ones
pin the numeric contracts.
"""

import itertools
import math
import threading
import time

import numpy as np
import pytest

from voxelstream import wire
from voxelstream.concurrent_hash import BlockHashMap, BlockHashSet, hash_key
from voxelstream.dataset import SphereScene, default_intrinsics, synthetic_frames
from voxelstream.exploration import EcConfig, ExplorationClient
from voxelstream.mc_encoding import (
    MeshConfig,
    affected_mc_blocks,
    recompute_mc_block,
    triangulate_block,
)
from voxelstream.mc_tables import (
    CLASSIC_CASE,
    CLASSIC_CORNERS,
    EDGE_CORNERS,
    TRI_TABLE,
)
from voxelstream.reconstruction import EmaState, ema_update
from voxelstream.scenario import ScenarioRunner
from voxelstream.server import Server, ServerConfig
from voxelstream.voxel_model import (
    BLOCK_EDGE,
    LOCAL_COORDS,
    FusionConfig,
    TsdfBlock,
    VoxelModel,
)


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {name}: {status}" + (f"  ({detail})" if detail else ""),
          flush=True)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# bandwidth scenarios (criteria 1 and 2 share the reconstructed room)
# ---------------------------------------------------------------------------

ROOM_SPEC = {
    "duration_s": 280.0,
    "server": {"codec": "deflate", "buckets": 1 << 17},
    "rc": {
        "scene": "room",
        "half_extent": [0.7, 0.55, 0.7],
        "frames": 70,
        "width": 240,
        "height": 180,
        "voxel_size": 0.005,
        "package_size": 512,
        "send_rate_hz": 100,
        "speed": 0,
    },
    "ec": [
        {"max_blocks": 512, "request_rate_hz": 100, "strategy": "random",
         "discard": True},
    ],
}


@pytest.fixture(scope="module")
def room_run():
    spec = dict(ROOM_SPEC)
    spec["rc"] = dict(spec["rc"])
    runner = ScenarioRunner(spec)
    # allocation at stride 2: adjacent rays diverge ~6mm at room depth,
    # far below the 40mm block edge
    orig = runner._build_rc

    def build_rc(port):
        rc, intr, frames = orig(port)
        rc.cfg.fusion.alloc_stride = 2
        return rc, intr, frames

    runner._build_rc = build_rc
    t0 = time.monotonic()
    result = runner.run()
    elapsed = time.monotonic() - t0
    yield runner, result, elapsed


def test_bandwidth_reduction(room_run):
    runner, result, elapsed = room_run
    ratio = result.ec_mean_bps / result.rc_mean_bps
    ok = ratio <= 0.15 and elapsed <= 300.0
    report(
        "bandwidth-reduction",
        ok,
        f"mc/tsdf mean ratio {ratio:.3f} (limit 0.15), "
        f"rc {result.rc_mean_bps / 1e6:.2f} MB/s, ec {result.ec_mean_bps / 1e6:.2f} "
        f"MB/s, wall {elapsed:.0f}s (limit 300)",
    )


def _drain_fresh_ec(port: int, max_blocks: int, model_blocks: int) -> tuple[int, float]:
    ec = ExplorationClient(
        EcConfig(request_rate_hz=100.0, max_blocks=max_blocks, discard=True,
                 voxel_size=0.005, reconnect=False)
    )
    ec.connect("127.0.0.1", port)
    ec.start()
    deadline = time.monotonic() + 120
    while time.monotonic() < deadline and ec.blocks_received < model_blocks:
        time.sleep(0.01)
    received = ec.blocks_received
    start, end = ec.first_data_t, ec.last_data_t
    _, rx_bytes = ec.total_bytes()
    ec.stop()
    assert received >= model_blocks, f"drained {received}/{model_blocks}"
    return rx_bytes, max(end - start, 1e-6)


def test_package_size_scaling(room_run):
    runner, _result, _elapsed = room_run
    # fresh server preloaded with the reconstructed model; uncompressed
    # frames keep per-request cost proportional to the payload
    source = runner.server
    srv = Server(ServerConfig(buckets=1 << 17, excess=1 << 17,
                              codec=wire.Codec.IDENTITY, voxel_size=0.005))
    for key, blk in source.tsdf_map.snapshot_items():
        srv.tsdf_map.put(key, blk)
    for key, blk in source.mc_map.snapshot_items():
        srv.mc_map.put(key, blk)
    srv.start(tcp=("127.0.0.1", 0))
    try:
        n = srv.mc_map.approx_size()
        sizes = [128, 256, 512, 1024]
        rates = []
        for size in sizes:
            rx, duration = _drain_fresh_ec(srv.tcp_port, size, n)
            rates.append(rx / duration)
        xs = np.array(sizes, dtype=float)
        ys = np.array(rates)
        slope = float((xs * ys).sum() / (xs * xs).sum())  # fit through origin
        ss_res = float(((ys - slope * xs) ** 2).sum())
        ss_tot = float(((ys - ys.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot
        detail = ", ".join(f"{s}:{r / 1e6:.1f}MB/s" for s, r in zip(sizes, rates))
        report("package-size-scaling", r2 >= 0.9,
               f"R2 {r2:.3f} (limit 0.9); {detail}")
    finally:
        srv.stop()


# ---------------------------------------------------------------------------
# raw encoding sizes (criterion 3)
# ---------------------------------------------------------------------------

def test_raw_encoding_ratio():
    mc = wire.encode_payload(wire.McBatch([((1, 2, 3), bytes(2048))]))
    tsdf = wire.encode_payload(wire.TsdfBatch([((1, 2, 3), bytes(6144))]))
    ok = (len(mc) - 4 == 2060) and (len(tsdf) - 4 == 6156)
    for count in (2, 17):
        mc_n = wire.encode_payload(
            wire.McBatch([((i, 0, 0), bytes(2048)) for i in range(count)])
        )
        tsdf_n = wire.encode_payload(
            wire.TsdfBatch([((i, 0, 0), bytes(6144)) for i in range(count)])
        )
        ok = ok and len(mc_n) == 4 + 2060 * count and len(tsdf_n) == 4 + 6156 * count
    report("raw-encoding-ratio", ok,
           f"mc {len(mc) - 4} B/block, tsdf {len(tsdf) - 4} B/block")


# ---------------------------------------------------------------------------
# completeness with outage and reset (criterion 4)
# ---------------------------------------------------------------------------

def test_completeness_with_outage_and_reset():
    spec = {
        "duration_s": 160.0,
        "server": {"codec": "deflate", "buckets": 1 << 16},
        "rc": {
            "scene": "room",
            "half_extent": [0.8, 0.6, 0.8],
            "frames": 60,
            "width": 160,
            "height": 120,
            "voxel_size": 0.01,
            "package_size": 256,
            "send_rate_hz": 200,
            "speed": 0.35,  # stretch the run so faults land mid-stream
        },
        "ec": [
            {"max_blocks": 256, "request_rate_hz": 100, "strategy": "random",
             "outage": [2.0, 5.0]},
            {"max_blocks": 256, "request_rate_hz": 100, "strategy": "random",
             "reset_at": 3.0},
        ],
    }
    runner = ScenarioRunner(spec)
    result = runner.run()
    ok = (
        all(result.exact_match)
        and all(c == 1.0 for c in result.final_completeness)
        and result.server_mc_blocks > 0
    )
    report(
        "completeness-outage-reset",
        ok,
        f"exact={result.exact_match}, completeness={result.final_completeness}, "
        f"model {result.server_mc_blocks} mc blocks",
    )


# ---------------------------------------------------------------------------
# concurrent hash guarantees (criterion 5)
# ---------------------------------------------------------------------------

def test_concurrent_hash_guarantees():
    t0 = time.monotonic()

    # (a) >= 1e6 mixed ops over map and set vs a sequential oracle
    def run_workload(structure, is_map):
        n_threads, ops_each = 8, 70000
        logs = {}

        def worker(tid):
            rng = np.random.default_rng(tid)
            log = []
            keys = rng.integers(0, 3000, size=ops_each)
            actions = rng.random(ops_each)
            for i in range(ops_each):
                key = (tid, int(keys[i]), 0)  # per-thread key space
                if actions[i] < 0.6:
                    if is_map:
                        structure.put(key, (tid, i))
                    else:
                        structure.insert(key)
                    log.append((key, ("put", (tid, i)) if is_map else ("add",)))
                else:
                    structure.remove(key)
                    log.append((key, ("del",)))
            logs[tid] = log

        threads = [threading.Thread(target=worker, args=(t,))
                   for t in range(n_threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        expected = {}
        for tid in range(n_threads):
            for key, op in logs[tid]:
                if op[0] == "del":
                    expected.pop(key, None)
                else:
                    expected[key] = op[1] if is_map else True
        return expected, n_threads * ops_each

    set_struct = BlockHashSet(1 << 14, 1 << 14)
    expected_set, n_set_ops = run_workload(set_struct, is_map=False)
    set_ok = set(set_struct.snapshot_keys()) == set(expected_set)

    map_struct = BlockHashMap(1 << 14, 1 << 14)
    expected_map, n_map_ops = run_workload(map_struct, is_map=True)
    got_map = dict(map_struct.snapshot_items())
    map_ok = got_map == expected_map

    total_ops = n_set_ops + n_map_ops

    # (b) same-key concurrent insertion: exactly one entry, 1e4 trials
    trials = 10_000
    n_workers = 8
    m = BlockHashMap(1 << 10, 1 << 14)
    start_barrier = threading.Barrier(n_workers + 1)
    done_barrier = threading.Barrier(n_workers + 1)
    current = {}
    positions = [[] for _ in range(n_workers)]
    stop = False

    def inserter(tid):
        while True:
            start_barrier.wait()
            if stop:
                return
            positions[tid].append(m.insert(current["key"], tid))
            done_barrier.wait()

    workers = [threading.Thread(target=inserter, args=(t,))
               for t in range(n_workers)]
    for w in workers:
        w.start()
    unique_ok = True
    for trial in range(trials):
        key = (trial, trial >> 3, -trial)
        current["key"] = key
        start_barrier.wait()
        done_barrier.wait()
        pos = {positions[t][-1] for t in range(n_workers)}
        if len(pos) != 1:
            unique_ok = False
            break
        bucket = hash_key(key, m.bucket_count)
        count = sum(
            1 for e in m.chain_entries(bucket) if m._occ[e] and m._keys[e] == key
        )
        if count != 1:
            unique_ok = False
            break
    stop = True
    start_barrier.wait()
    for w in workers:
        w.join()

    # (c) failure-permitting baseline loses keys on a contended workload
    import sys

    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    try:
        lost = 0
        guaranteed_complete = True
        for _attempt in range(30):
            base = BlockHashSet(4, 1 << 13)

            def lossy(tid):
                for i in range(500):
                    base.try_insert_once((tid, i, 0))

            threads = [threading.Thread(target=lossy, args=(t,)) for t in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            lost = 8 * 500 - len(base.snapshot_keys())
            if lost > 0:
                break
        guaranteed = BlockHashSet(4, 1 << 13)

        def safe(tid):
            for i in range(500):
                guaranteed.insert((tid, i, 0))

        threads = [threading.Thread(target=safe, args=(t,)) for t in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        guaranteed_complete = len(guaranteed.snapshot_keys()) == 8 * 500
    finally:
        sys.setswitchinterval(old_interval)

    elapsed = time.monotonic() - t0
    ok = (set_ok and map_ok and unique_ok and lost > 0
          and guaranteed_complete and elapsed <= 120.0)
    report(
        "concurrent-hash-guarantees",
        ok,
        f"{total_ops} oracle ops (set {set_ok}, map {map_ok}), "
        f"{trials} same-key trials unique={unique_ok}, baseline lost {lost} keys, "
        f"guaranteed complete={guaranteed_complete}, wall {elapsed:.0f}s (limit 120)",
    )


# ---------------------------------------------------------------------------
# EMA operator (criterion 6)
# ---------------------------------------------------------------------------

def test_ema_operator():
    state = EmaState(value=17.25, tau=5.0, last_t=0.0)
    fixed_ok = True
    t = 0.0
    for i in range(100):
        t += 0.1 + (i % 7) * 0.05
        ema_update(state, t, 17.25, 17.25)
        if abs(state.value - 17.25) > 1e-9:
            fixed_ok = False
            break

    step = EmaState(value=0.0, tau=5.0, last_t=0.0)
    out = ema_update(step, 5.0, 0.0, 100.0)
    u = math.exp(-1.0)
    v = 1.0 - u  # v = (1-u)/a with a = 1
    independent = u * 0.0 + (v - u) * 0.0 + (1.0 - v) * 100.0
    step_ok = abs(out - independent) <= 1e-6 and abs(out - 36.787944117) <= 1e-6

    report("ema-operator", fixed_ok and step_ok,
           f"fixed point {fixed_ok}, unit step {out:.9f} vs {independent:.9f}")


# ---------------------------------------------------------------------------
# MC neighbor consistency (criterion 7)
# ---------------------------------------------------------------------------

def test_mc_neighbor_consistency():
    rng = np.random.default_rng(99)
    tsdf_keys = list(itertools.product(range(4), repeat=3))

    def random_block(key):
        blk = TsdfBlock(key)
        blk.tsdf = rng.uniform(-1, 1, 512).astype(np.float32)
        blk.weight = (rng.random(512) > 0.15).astype(np.float32)
        blk.color = rng.integers(0, 256, (512, 3)).astype(np.uint8)
        return blk

    tsdf = {k: random_block(k) for k in tsdf_keys}
    all_mc = set()
    for k in tsdf_keys:
        all_mc.update(affected_mc_blocks(k))
    mc = {k: recompute_mc_block(k, tsdf.get) for k in all_mc}

    ok = True
    for trial in range(100):
        target = tsdf_keys[int(rng.integers(len(tsdf_keys)))]
        tsdf[target] = random_block(target)
        for k in affected_mc_blocks(target):
            mc[k] = recompute_mc_block(k, tsdf.get)
        for k in all_mc:
            if mc[k].to_bytes() != recompute_mc_block(k, tsdf.get).to_bytes():
                ok = False
                break
        if not ok:
            break
    report("mc-neighbor-consistency", ok, "100 randomized single-block updates")


# ---------------------------------------------------------------------------
# midpoint placement vs interpolating reference (criterion 8)
# ---------------------------------------------------------------------------

def _interpolating_vertices(key, mc_index_flat, tsdf_lookup, voxel):
    """Reference interpolating triangulation, same edges and ordering."""
    # 9x9x9 corner grid from the block and its +1 neighbors
    grid = np.zeros((9, 9, 9), dtype=np.float64)  # [z, y, x]
    for dz, dy, dx in itertools.product((0, 1), repeat=3):
        blk = tsdf_lookup((key[0] + dx, key[1] + dy, key[2] + dz))
        if blk is None:
            continue
        cube = blk.tsdf.reshape(8, 8, 8)
        zs = slice(8, 9) if dz else slice(0, 8)
        ys = slice(8, 9) if dy else slice(0, 8)
        xs = slice(8, 9) if dx else slice(0, 8)
        zsrc = slice(0, 1) if dz else slice(0, 8)
        ysrc = slice(0, 1) if dy else slice(0, 8)
        xsrc = slice(0, 1) if dx else slice(0, 8)
        grid[zs, ys, xs] = cube[zsrc, ysrc, xsrc]

    verts = []
    for f in np.flatnonzero(mc_index_flat):
        case = int(mc_index_flat[f])
        x, y, z = LOCAL_COORDS[f]
        base = (np.asarray(key) * BLOCK_EDGE + (x, y, z) + 0.5) * voxel
        for edge in TRI_TABLE[CLASSIC_CASE[case]]:
            a, b = EDGE_CORNERS[edge]
            pa, pb = CLASSIC_CORNERS[a].astype(float), CLASSIC_CORNERS[b].astype(float)
            ta = grid[z + int(pa[2]), y + int(pa[1]), x + int(pa[0])]
            tb = grid[z + int(pb[2]), y + int(pb[1]), x + int(pb[0])]
            denom = ta - tb
            t = 0.5 if abs(denom) < 1e-12 else ta / denom
            t = min(max(t, 0.0), 1.0)
            verts.append(base + (pa + t * (pb - pa)) * voxel)
    return np.asarray(verts)


def test_midpoint_approximation_bound():
    scene = SphereScene(radius=0.5, orbit_radius=1.6)
    intr = default_intrinsics(96, 72)
    cfg = FusionConfig(voxel_size=0.01, truncation=0.06)
    model = VoxelModel(cfg, 1 << 14, 1 << 14)
    for frame in synthetic_frames(scene, intr, 10):
        model.allocate_blocks(frame.depth, frame.pose, intr)
        model.integrate_frame(frame.depth, frame.color, frame.pose, intr)

    bound = cfg.voxel_size * math.sqrt(3.0) / 2.0
    mesh_cfg = MeshConfig(voxel_size=cfg.voxel_size)
    worst = 0.0
    n_checked = 0
    ok = True
    for key in model.keys():
        mc = recompute_mc_block(key, model.get_block)
        mesh = triangulate_block(mc, mesh_cfg)
        if not mesh.triangle_count():
            continue
        ref = _interpolating_vertices(key, mc.index, model.get_block,
                                      cfg.voxel_size)
        assert len(ref) == len(mesh.positions)
        dist = np.linalg.norm(mesh.positions.astype(np.float64) - ref, axis=1)
        worst = max(worst, float(dist.max()))
        n_checked += len(dist)
        if worst > bound + 1e-9:
            ok = False
            break
    report(
        "midpoint-approximation-bound",
        ok and n_checked > 10000,
        f"{n_checked} vertices, worst {worst * 1000:.2f}mm vs bound "
        f"{bound * 1000:.2f}mm",
    )
