"""Scenario harness: run server + clients end to end and collect metrics.

A scenario is a TOML file:

    duration_s = 30.0          # optional hard cap

    [server]
    codec = "deflate"          # identity | deflate | lz_high
    buckets = 65536

    [rc]
    scene = "room"             # room | sphere
    frames = 90
    width = 240
    height = 180
    voxel_size = 0.005
    package_size = 512
    send_rate_hz = 100
    speed = 0                  # 0 = replay as fast as possible
    dataset = "seq.vcseq"      # alternative to scene/frames

    [[ec]]
    max_blocks = 512
    request_rate_hz = 100
    strategy = "random"        # random | visible | order
    discard = false
    outage = [4.0, 5.0]        # drop the link at t=4s for 5s
    reset_at = 6.0             # send a reset request at t=6s

Components run in-process on loopback sockets; the run produces per-second
CSV rows per component and a summary with per-link mean/max bandwidth,
total streaming time, and final completeness.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .dataset import default_intrinsics, make_scene, read_sequence, synthetic_frames
from .exploration import EcConfig, ExplorationClient
from .reconstruction import RcConfig, ReconstructionClient
from .server import Server, ServerConfig
from .voxel_model import FusionConfig
from . import wire

_CODECS = {
    "identity": wire.Codec.IDENTITY,
    "deflate": wire.Codec.DEFLATE,
    "lz_high": wire.Codec.LZ_HIGH,
}
_STRATEGIES = {
    "random": wire.Strategy.RANDOM,
    "visible": wire.Strategy.VISIBLE_FIRST,
    "order": wire.Strategy.GENERATION_ORDER,
}


@dataclass
class LinkSample:
    t: float
    rc_rx: int
    ec_tx: int
    pending: int
    tsdf_blocks: int
    mc_blocks: int


@dataclass
class ScenarioResult:
    duration_s: float
    rc_rx_bytes: int
    ec_tx_bytes: int
    rc_mean_bps: float
    rc_max_bps: float
    ec_mean_bps: float
    ec_max_bps: float
    final_completeness: list[float]
    ec_blocks: list[int]
    server_mc_blocks: int
    server_tsdf_blocks: int
    samples: list[LinkSample] = field(default_factory=list)
    exact_match: list[bool] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"duration: {self.duration_s:.1f}s",
            f"rc->server: {self.rc_rx_bytes} bytes, mean "
            f"{self.rc_mean_bps / 1e6:.2f} MB/s, max {self.rc_max_bps / 1e6:.2f} MB/s",
            f"server->ec: {self.ec_tx_bytes} bytes, mean "
            f"{self.ec_mean_bps / 1e6:.2f} MB/s, max {self.ec_max_bps / 1e6:.2f} MB/s",
            f"model: tsdf {self.server_tsdf_blocks}, mc {self.server_mc_blocks}",
        ]
        for i, (c, n, x) in enumerate(
            zip(self.final_completeness, self.ec_blocks, self.exact_match)
        ):
            lines.append(
                f"ec[{i}]: completeness {c:.4f}, {n} blocks, exact={'yes' if x else 'no'}"
            )
        return "\n".join(lines)


def parse_scenario(path: str) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


@dataclass
class _EcPlan:
    client: ExplorationClient
    outage: Optional[tuple[float, float]] = None  # (start_s, duration_s)
    reset_at: Optional[float] = None


class ScenarioRunner:
    """Drives one scenario; also usable programmatically by the tests."""

    def __init__(self, spec: dict, metrics_dir: Optional[str] = None) -> None:
        self.spec = spec
        self.metrics_dir = metrics_dir
        self.server: Optional[Server] = None
        self.rc: Optional[ReconstructionClient] = None
        self.ec_plans: list[_EcPlan] = []
        self.samples: list[LinkSample] = []

    # -- setup ----------------------------------------------------------------

    def _build_server(self) -> Server:
        s = self.spec.get("server", {})
        cfg = ServerConfig(
            buckets=int(s.get("buckets", 1 << 16)),
            excess=int(s.get("excess", s.get("buckets", 1 << 16))),
            codec=_CODECS[s.get("codec", "deflate")],
            retention_s=float(s.get("retention_s", 3600.0)),
        )
        server = Server(cfg)
        server.start(tcp=("127.0.0.1", 0))
        return server

    def _build_rc(self, port: int) -> tuple[ReconstructionClient, object, object]:
        r = self.spec.get("rc", {})
        voxel = float(r.get("voxel_size", 0.005))
        truncation = float(r.get("truncation", max(0.06, 4 * voxel)))
        fusion = FusionConfig(voxel_size=voxel, truncation=truncation)
        cfg = RcConfig(
            fusion=fusion,
            package_size=int(r.get("package_size", 512)),
            send_rate_hz=float(r.get("send_rate_hz", 100.0)),
            codec=_CODECS[r.get("codec", self.spec.get("server", {}).get("codec", "deflate"))],
            speed=float(r.get("speed", 0.0)),
            ema_threshold=float(r.get("ema_threshold", 64.0)),
            prefetch_cooldown=float(r.get("prefetch_cooldown", 5.0)),
        )
        rc = ReconstructionClient(cfg)
        rc.connect("127.0.0.1", port)
        if "dataset" in r:
            intr, frames = read_sequence(r["dataset"])
        else:
            intr = default_intrinsics(int(r.get("width", 240)), int(r.get("height", 180)))
            scene_kwargs = {}
            if "half_extent" in r:
                scene_kwargs["half_extent"] = tuple(r["half_extent"])
            scene = make_scene(r.get("scene", "room"), **scene_kwargs)
            frames = synthetic_frames(
                scene, intr, int(r.get("frames", 90)), fps=float(r.get("fps", 30.0))
            )
        return rc, intr, frames

    def _build_ecs(self, port: int) -> None:
        for e in self.spec.get("ec", []):
            cfg = EcConfig(
                request_rate_hz=float(e.get("request_rate_hz", 100.0)),
                max_blocks=int(e.get("max_blocks", 512)),
                strategy=_STRATEGIES[e.get("strategy", "random")],
                discard=bool(e.get("discard", False)),
                voxel_size=float(self.spec.get("rc", {}).get("voxel_size", 0.005)),
            )
            ec = ExplorationClient(cfg)
            ec.connect("127.0.0.1", port)
            ec.start()
            outage = e.get("outage")
            self.ec_plans.append(
                _EcPlan(
                    ec,
                    tuple(outage) if outage else None,
                    float(e["reset_at"]) if "reset_at" in e else None,
                )
            )

    # -- run -------------------------------------------------------------------

    def run(self) -> ScenarioResult:
        self.server = self._build_server()
        port = self.server.tcp_port
        rc, intr, frames = self._build_rc(port)
        self.rc = rc
        self._build_ecs(port)

        t0 = time.monotonic()
        rc_thread = threading.Thread(
            target=rc.run_sequence, args=(intr, frames), daemon=True, name="scn-rc"
        )
        rc_thread.start()

        fault_threads = [
            threading.Thread(target=self._fault_schedule, args=(plan, t0), daemon=True)
            for plan in self.ec_plans
            if plan.outage or plan.reset_at is not None
        ]
        for t in fault_threads:
            t.start()

        duration_cap = float(self.spec.get("duration_s", 300.0))
        sampler_stop = threading.Event()
        sampler = threading.Thread(
            target=self._sample_loop, args=(t0, sampler_stop), daemon=True
        )
        sampler.start()

        rc_thread.join(duration_cap)
        rc.drain(max(5.0, duration_cap - (time.monotonic() - t0)))
        self._wait_quiescent(t0, duration_cap)
        for t in fault_threads:
            t.join(timeout=1.0)
        sampler_stop.set()
        sampler.join(timeout=2.0)
        result = self._collect(time.monotonic() - t0)
        self.shutdown()
        return result

    def _fault_schedule(self, plan: _EcPlan, t0: float) -> None:
        events: list[tuple[float, str]] = []
        if plan.outage:
            events.append((plan.outage[0], "drop"))
        if plan.reset_at is not None:
            events.append((plan.reset_at, "reset"))
        events.sort()
        for at, kind in events:
            delay = t0 + at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            if kind == "drop":
                plan.client.pause_requests(True)
                plan.client.drop_connection()
                time.sleep(plan.outage[1])
                plan.client.pause_requests(False)
            else:
                try:
                    plan.client.request_reset()
                except Exception:
                    pass

    def _sample_loop(self, t0: float, stop: threading.Event) -> None:
        while not stop.wait(1.0):
            rc_rx, ec_tx = self.server.link_totals()
            tsdf_n, mc_n = self.server.model_sizes()
            pending = sum(
                s.stream.size() for s in self.server._exploration_sessions()
            )
            self.samples.append(
                LinkSample(time.monotonic() - t0, rc_rx, ec_tx, pending, tsdf_n, mc_n)
            )

    def _wait_quiescent(self, t0: float, cap: float) -> None:
        """Wait until stream sets are empty and deliveries have settled.

        An empty stream set only means extraction happened; the last batch
        may still be in flight, so also require that no client has received
        data for a moment.
        """
        deadline = t0 + cap
        stable = 0
        while time.monotonic() < deadline:
            pending = sum(
                s.stream.size() for s in self.server._exploration_sessions()
            )
            rc_pending = self.rc.stream.size()
            settled = all(
                time.monotonic() - plan.client.last_data_t >= 0.6
                for plan in self.ec_plans
            )
            if pending == 0 and rc_pending == 0 and settled:
                stable += 1
                if stable >= 3:
                    return
            else:
                stable = 0
            time.sleep(0.2)

    def _collect(self, duration: float) -> ScenarioResult:
        rc_rx, ec_tx = self.server.link_totals()
        rc_rates, ec_rates = [], []
        prev = LinkSample(0.0, 0, 0, 0, 0, 0)
        for s in self.samples:
            dt = s.t - prev.t
            if dt > 0:
                rc_rates.append((s.rc_rx - prev.rc_rx) / dt)
                ec_rates.append((s.ec_tx - prev.ec_tx) / dt)
            prev = s
        server_keys = set(self.server.mc_map.snapshot_keys())
        completeness, blocks, exact = [], [], []
        for plan in self.ec_plans:
            ec = plan.client
            if ec.cfg.discard:
                completeness.append(float("nan"))
                blocks.append(ec.blocks_received)
                exact.append(False)
                continue
            local = set(ec.model_keys())
            completeness.append(
                len(local & server_keys) / len(server_keys) if server_keys else 1.0
            )
            blocks.append(len(local))
            same = local == server_keys and all(
                ec.mc_map.get(k).to_bytes() == self.server.mc_map.get(k)
                for k in server_keys
            )
            exact.append(same)
        tsdf_n, mc_n = self.server.model_sizes()
        return ScenarioResult(
            duration_s=duration,
            rc_rx_bytes=rc_rx,
            ec_tx_bytes=ec_tx,
            rc_mean_bps=rc_rx / duration if duration > 0 else 0.0,
            rc_max_bps=max(rc_rates, default=0.0),
            ec_mean_bps=ec_tx / duration if duration > 0 else 0.0,
            ec_max_bps=max(ec_rates, default=0.0),
            final_completeness=completeness,
            ec_blocks=blocks,
            server_mc_blocks=mc_n,
            server_tsdf_blocks=tsdf_n,
            samples=self.samples,
            exact_match=exact,
        )

    def shutdown(self) -> None:
        for plan in self.ec_plans:
            plan.client.stop()
        if self.rc is not None:
            self.rc.close()
        if self.server is not None:
            self.server.stop()

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_s", "rc_rx_bytes", "ec_tx_bytes", "pending",
                        "tsdf_blocks", "mc_blocks"])
            for s in self.samples:
                w.writerow([f"{s.t:.3f}", s.rc_rx, s.ec_tx, s.pending,
                            s.tsdf_blocks, s.mc_blocks])


def run_scenario(path: str, csv_out: Optional[str] = None) -> ScenarioResult:
    runner = ScenarioRunner(parse_scenario(path))
    result = runner.run()
    if csv_out:
        runner.write_csv(csv_out)
    return result
