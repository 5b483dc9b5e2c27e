"""Command-line entry points: server, rc, ec, scenario, dataset.

    voxelstream server --listen 0.0.0.0:7801 --ws-listen 0.0.0.0:7802 \
        --buckets 2^20 --excess 2^20 --codec 2 --retention 3600 --metrics out.csv
    voxelstream rc --server host:7801 --synthetic room --voxel 0.005 \
        --package 512 --rate 100 --metrics rc.csv
    voxelstream ec --server host:7801 --rate 100 --max 512 --strategy random \
        --metrics ec.csv --discard
    voxelstream scenario run spec.toml --csv run.csv
    voxelstream dataset gen --scene room --frames 90 --out seq.vcseq
"""

from __future__ import annotations

import argparse
import csv
import signal
import sys
import threading
import time

from . import wire
from .dataset import (
    default_intrinsics,
    make_scene,
    read_sequence,
    synthetic_frames,
    write_sequence,
)
from .exploration import EcConfig, ExplorationClient
from .geometry import Pose
from .reconstruction import RcConfig, ReconstructionClient
from .scenario import ScenarioRunner, parse_scenario
from .server import Server, ServerConfig
from .voxel_model import FusionConfig


def _size(text: str) -> int:
    """Accept plain integers or power syntax like 2^20."""
    if "^" in text:
        base, exp = text.split("^", 1)
        return int(base) ** int(exp)
    return int(text)


def _hostport(text: str, default_port: int) -> tuple[str, int]:
    if ":" in text:
        host, port = text.rsplit(":", 1)
        return host, int(port)
    return text, default_port


_STRATEGIES = {
    "random": wire.Strategy.RANDOM,
    "visible": wire.Strategy.VISIBLE_FIRST,
    "order": wire.Strategy.GENERATION_ORDER,
}


def _cmd_server(args: argparse.Namespace) -> int:
    cfg = ServerConfig(
        buckets=_size(args.buckets),
        excess=_size(args.excess),
        codec=wire.Codec(args.codec),
        retention_s=args.retention,
        metrics_path=args.metrics,
    )
    server = Server(cfg)
    tcp = _hostport(args.listen, 7801)
    ws = _hostport(args.ws_listen, 7802) if args.ws_listen else None
    server.start(tcp=tcp, ws=ws)
    print(f"listening tcp={tcp[0]}:{server.tcp_port}"
          + (f" ws={ws[0]}:{ws[1]}/ws" if ws else ""))
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    server.stop()
    return 0


def _cmd_rc(args: argparse.Namespace) -> int:
    fusion = FusionConfig(voxel_size=args.voxel,
                          truncation=max(0.06, 4 * args.voxel))
    cfg = RcConfig(
        fusion=fusion,
        package_size=args.package,
        send_rate_hz=args.rate,
        codec=wire.Codec(args.codec),
        speed=args.speed,
    )
    rc = ReconstructionClient(cfg)
    host, port = _hostport(args.server, 7801)
    rc.connect(host, port)

    if args.dataset:
        intr, frames = read_sequence(args.dataset)
    else:
        intr = default_intrinsics(args.width, args.height)
        frames = synthetic_frames(make_scene(args.synthetic), intr, args.frames)

    metrics = _open_metrics(args.metrics, ["t_s", "model_blocks", "pending",
                                           "bytes_sent", "blocks_streamed"])
    stop = threading.Event()

    def sample() -> None:
        t0 = time.monotonic()
        while not stop.wait(1.0):
            sent = rc.conn.bytes_sent if rc.conn else 0
            metrics.writerow([f"{time.monotonic() - t0:.3f}",
                              len(rc.model.keys()), rc.stream.size(), sent,
                              rc.blocks_streamed])

    if metrics:
        threading.Thread(target=sample, daemon=True).start()
    try:
        rc.run_sequence(intr, frames)
        rc.drain(timeout=600.0)
        if args.linger > 0:
            print("sequence complete; serving requests "
                  f"for {args.linger:.0f}s (reset/texture)")
            time.sleep(args.linger)
    finally:
        stop.set()
        rc.close()
    print(f"done: {len(rc.model.keys())} blocks, {rc.blocks_streamed} streamed")
    return 0


def _load_pose_script(path: str) -> list[tuple[float, Pose]]:
    """Lines of: t  eye_x eye_y eye_z  target_x target_y target_z."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 7:
                raise ValueError("pose script lines need 7 numbers")
            out.append((vals[0], Pose.look_at(vals[1:4], vals[4:7])))
    return out


def _cmd_ec(args: argparse.Namespace) -> int:
    cfg = EcConfig(
        request_rate_hz=args.rate,
        max_blocks=args.max,
        strategy=_STRATEGIES[args.strategy],
        discard=args.discard,
        voxel_size=args.voxel,
        idle_stop_s=args.idle_stop,
    )
    ec = ExplorationClient(cfg)
    host, port = _hostport(args.server, 7801)
    ec.connect(host, port)
    ec.start()

    script = _load_pose_script(args.pose_script) if args.pose_script else []
    metrics = _open_metrics(args.metrics, ["t_s", "blocks", "bytes_received",
                                           "completeness"])
    t0 = time.monotonic()
    next_pose = 0
    try:
        while True:
            time.sleep(0.25)
            now = time.monotonic() - t0
            while next_pose < len(script) and script[next_pose][0] <= now:
                pose = script[next_pose][1]
                ec.send_pose(pose)
                ec.cfg.pose = tuple(pose.to_floats())
                next_pose += 1
            if metrics and abs(now % 1.0) < 0.25:
                ref = ec.last_stats.model_blocks if ec.last_stats else 0
                comp = len(ec.model_keys()) / ref if ref else 0.0
                metrics.writerow([f"{now:.3f}", len(ec.model_keys()),
                                  ec.total_bytes()[1], f"{comp:.4f}"])
            ec.rebuild_dirty()
            if args.idle_stop and now > 2.0:
                if time.monotonic() - ec.last_data_t >= args.idle_stop:
                    break
    except KeyboardInterrupt:
        pass
    finally:
        ec.stop()
    print(f"done: {len(ec.model_keys())} blocks, "
          f"{ec.total_bytes()[1]} bytes received")
    return 0


def _cmd_scenario(args: argparse.Namespace) -> int:
    runner = ScenarioRunner(parse_scenario(args.spec))
    result = runner.run()
    if args.csv:
        runner.write_csv(args.csv)
    print(result.summary())
    return 0


def _cmd_dataset(args: argparse.Namespace) -> int:
    intr = default_intrinsics(args.width, args.height)
    scene = make_scene(args.scene)
    n = write_sequence(
        args.out, intr, synthetic_frames(scene, intr, args.frames, fps=args.fps)
    )
    print(f"wrote {n} frames to {args.out}")
    return 0


class _Metrics:
    def __init__(self, path: str, header: list[str]) -> None:
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(header)

    def writerow(self, row) -> None:
        self._w.writerow(row)
        self._f.flush()

    def __bool__(self) -> bool:
        return True


def _open_metrics(path, header):
    return _Metrics(path, header) if path else None


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="voxelstream")
    sub = p.add_subparsers(dest="cmd", required=True)

    ps = sub.add_parser("server", help="run the streaming server")
    ps.add_argument("--listen", default="0.0.0.0:7801")
    ps.add_argument("--ws-listen", default="0.0.0.0:7802")
    ps.add_argument("--buckets", default="2^20")
    ps.add_argument("--excess", default="2^20")
    ps.add_argument("--codec", type=int, default=2, choices=[0, 1, 2])
    ps.add_argument("--retention", type=float, default=3600.0)
    ps.add_argument("--metrics", default=None)
    ps.set_defaults(func=_cmd_server)

    pr = sub.add_parser("rc", help="run the reconstruction client")
    pr.add_argument("--server", default="127.0.0.1:7801")
    src = pr.add_mutually_exclusive_group()
    src.add_argument("--dataset", default=None, help="replay a .vcseq file")
    src.add_argument("--synthetic", default="room", choices=["room", "sphere"])
    pr.add_argument("--frames", type=int, default=90)
    pr.add_argument("--width", type=int, default=240)
    pr.add_argument("--height", type=int, default=180)
    pr.add_argument("--voxel", type=float, default=0.005)
    pr.add_argument("--package", type=int, default=512)
    pr.add_argument("--rate", type=float, default=100.0)
    pr.add_argument("--codec", type=int, default=2, choices=[0, 1, 2])
    pr.add_argument("--speed", type=float, default=1.0,
                    help="timestamp pacing multiplier, 0 = flat out")
    pr.add_argument("--linger", type=float, default=0.0,
                    help="keep serving reset/texture requests after the end")
    pr.add_argument("--metrics", default=None)
    pr.set_defaults(func=_cmd_rc)

    pe = sub.add_parser("ec", help="run the exploration/benchmark client")
    pe.add_argument("--server", default="127.0.0.1:7801")
    pe.add_argument("--rate", type=float, default=100.0)
    pe.add_argument("--max", type=int, default=512)
    pe.add_argument("--strategy", default="random",
                    choices=["random", "visible", "order"])
    pe.add_argument("--voxel", type=float, default=0.005)
    pe.add_argument("--pose-script", default=None)
    pe.add_argument("--metrics", default=None)
    pe.add_argument("--discard", action="store_true")
    pe.add_argument("--idle-stop", type=float, default=10.0,
                    help="exit after this many seconds without data")
    pe.set_defaults(func=_cmd_ec)

    pc = sub.add_parser("scenario", help="run a scripted end-to-end scenario")
    csub = pc.add_subparsers(dest="scmd", required=True)
    prun = csub.add_parser("run")
    prun.add_argument("spec")
    prun.add_argument("--csv", default=None)
    prun.set_defaults(func=_cmd_scenario)

    pd = sub.add_parser("dataset", help="generate synthetic sequences")
    dsub = pd.add_subparsers(dest="dcmd", required=True)
    pgen = dsub.add_parser("gen")
    pgen.add_argument("--scene", default="room", choices=["room", "sphere"])
    pgen.add_argument("--frames", type=int, default=90)
    pgen.add_argument("--width", type=int, default=240)
    pgen.add_argument("--height", type=int, default=180)
    pgen.add_argument("--fps", type=float, default=30.0)
    pgen.add_argument("--out", required=True)
    pgen.set_defaults(func=_cmd_dataset)

    args = p.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
