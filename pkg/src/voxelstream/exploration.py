"""Exploration client: requests blocks, maintains the remote MC model.

The same class serves as the headless benchmark client (discard mode keeps
only byte/block counters) and as the model-building client used by tests
and the scenario harness.  Requests go out at a fixed rate with the chosen
strategy; received batches upsert the local MC map and dirty their 15^3
mesh regions, which are rebuilt under a per-call budget.

A dropped connection is resumed with the same client id; the server kept
the session's stream set, so only blocks updated during the outage are
re-delivered and nothing is lost.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .concurrent_hash import BlockHashMap, BlockKey
from .geometry import Pose
from .mc_encoding import (
    McBlock,
    MeshBlock,
    MeshConfig,
    build_mesh_block,
    mesh_region_key,
)
from .transport import TransportClosed, connect_tcp
from . import wire

log = logging.getLogger(__name__)


@dataclass
class EcConfig:
    request_rate_hz: float = 100.0
    max_blocks: int = 512
    strategy: int = wire.Strategy.RANDOM
    discard: bool = False  # benchmark mode: count, do not store
    voxel_size: float = 0.005
    pose: tuple[float, ...] = (1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0)
    request_intrinsics: tuple[float, ...] = (200.0, 200.0, 120.0, 90.0, 0.05, 20.0)
    idle_stop_s: Optional[float] = None  # stop after this long without data
    reconnect: bool = True
    rebuild_budget: int = 8  # dirty regions rebuilt per rebuild call
    buckets: int = 1 << 16
    excess: int = 1 << 16

    def __post_init__(self) -> None:
        if self.request_rate_hz <= 0:
            raise ValueError("request_rate_hz must be positive")


class ExplorationClient:
    def __init__(self, cfg: EcConfig, client_id: Optional[bytes] = None) -> None:
        self.cfg = cfg
        self.client_id = client_id or np.random.bytes(16)
        self.mc_map = BlockHashMap(cfg.buckets, cfg.excess)
        self.mesh_blocks: dict[BlockKey, MeshBlock] = {}
        self._dirty: dict[BlockKey, None] = {}
        self._regions: dict[BlockKey, set[BlockKey]] = {}
        self._model_lock = threading.Lock()
        self.conn = None
        self._addr: Optional[tuple[str, int]] = None
        self._stop = threading.Event()
        self.blocks_received = 0
        self.batches_received = 0
        self.first_data_t: Optional[float] = None
        self.last_data_t = time.monotonic()
        self.last_stats: Optional[wire.Stats] = None
        self.peer_poses: dict[bytes, tuple[int, tuple[float, ...]]] = {}
        self.last_texture: Optional[wire.TextureImage] = None
        self._threads: list[threading.Thread] = []
        self._pause_requests = threading.Event()
        self._past_bytes: tuple[int, int] = (0, 0)

    # -- connection ------------------------------------------------------------

    def connect(self, host: str, port: int) -> wire.HelloAck:
        self._addr = (host, port)
        old = self.conn
        if old is not None:
            self._past_bytes = (
                self._past_bytes[0] + old.bytes_sent,
                self._past_bytes[1] + old.bytes_received,
            )
            old.close()
        conn = connect_tcp(host, port)
        conn.send(
            wire.Hello(wire.Role.EXPLORATION, self.client_id, self.cfg.voxel_size),
            wire.Codec.IDENTITY,
        )
        ack = conn.recv()
        if not isinstance(ack, wire.HelloAck) or ack.status != 0:
            conn.close()
            raise RuntimeError(f"server rejected session: {ack}")
        self.conn = conn
        return ack

    def _reconnect(self) -> bool:
        if not self.cfg.reconnect or self._addr is None or self._stop.is_set():
            return False
        host, port = self._addr
        for delay in (0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 4.0, 4.0, 4.0, 4.0):
            if self._stop.is_set():
                return False
            try:
                self.connect(host, port)
                return True
            except (OSError, TransportClosed, wire.WireError, RuntimeError):
                time.sleep(delay)
        return False

    def start(self) -> None:
        for target, name in ((self._request_loop, "ec-req"),
                             (self._receive_loop, "ec-recv")):
            t = threading.Thread(target=target, daemon=True, name=name)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        if self.conn is not None:
            self.conn.close()

    def drop_connection(self) -> None:
        """Simulate an outage; the loops will reconnect with the same id."""
        if self.conn is not None:
            self.conn.close()

    def pause_requests(self, paused: bool) -> None:
        if paused:
            self._pause_requests.set()
        else:
            self._pause_requests.clear()

    # -- request/receive loops ----------------------------------------------------

    def _request_loop(self) -> None:
        interval = 1.0 / self.cfg.request_rate_hz
        while not self._stop.is_set():
            start = time.monotonic()
            if not self._pause_requests.is_set():
                conn = self.conn
                if conn is not None:
                    try:
                        conn.send(
                            wire.BlockRequest(
                                self.cfg.max_blocks,
                                self.cfg.strategy,
                                self.cfg.pose,
                                self.cfg.request_intrinsics,
                            ),
                            wire.Codec.IDENTITY,
                        )
                    except (TransportClosed, OSError):
                        pass  # receive loop owns reconnection
            sleep = interval - (time.monotonic() - start)
            if sleep > 0:
                time.sleep(sleep)

    def _receive_loop(self) -> None:
        while not self._stop.is_set():
            conn = self.conn
            if conn is None or conn.closed:
                if not self._reconnect():
                    time.sleep(0.1)
                continue
            try:
                msg = conn.recv()
            except (TransportClosed, wire.WireError):
                if self._stop.is_set():
                    return
                if not self._reconnect():
                    time.sleep(0.1)
                continue
            try:
                self._dispatch(msg)
            except Exception:
                log.exception("error applying %s", type(msg).__name__)

    def _dispatch(self, msg: wire.Message) -> None:
        if isinstance(msg, wire.McBatch):
            self.on_batch(msg)
        elif isinstance(msg, wire.DeleteBlocks):
            self.on_delete(msg.keys)
        elif isinstance(msg, wire.Stats):
            self.last_stats = msg
        elif isinstance(msg, wire.PoseBroadcast):
            for cid, role, pose in msg.entries:
                self.peer_poses[cid] = (role, pose)
        elif isinstance(msg, wire.TextureImage):
            self.last_texture = msg

    # -- model maintenance -----------------------------------------------------------

    def on_batch(self, batch: wire.McBatch) -> None:
        self.batches_received += 1
        if batch.blocks:
            self.last_data_t = time.monotonic()
            if self.first_data_t is None:
                self.first_data_t = self.last_data_t
        self.blocks_received += len(batch.blocks)
        if self.cfg.discard:
            return
        for key, raw in batch.blocks:
            blk = McBlock.from_bytes(key, raw)
            self.mc_map.put(key, blk)
            region = mesh_region_key(key)
            with self._model_lock:
                self._regions.setdefault(region, set()).add(key)
                self._dirty[region] = None

    def on_delete(self, keys: list[BlockKey]) -> None:
        for key in keys:
            self.mc_map.remove(key)
            region = mesh_region_key(key)
            with self._model_lock:
                members = self._regions.get(region)
                if members is not None:
                    members.discard(key)
                self._dirty[region] = None

    def rebuild_dirty(self, budget: Optional[int] = None) -> int:
        """Triangulate up to budget dirty mesh regions; returns the count."""
        if budget is None:
            budget = self.cfg.rebuild_budget
        built = 0
        mesh_cfg = MeshConfig(voxel_size=self.cfg.voxel_size)
        while built < budget:
            with self._model_lock:
                try:
                    region = next(iter(self._dirty))
                except StopIteration:
                    break
                del self._dirty[region]
                members = sorted(self._regions.get(region, ()))
            blocks = [b for b in (self.mc_map.get(k) for k in members) if b is not None]
            self.mesh_blocks[region] = build_mesh_block(region, blocks, mesh_cfg)
            built += 1
        return built

    def dirty_count(self) -> int:
        with self._model_lock:
            return len(self._dirty)

    # -- measurements -------------------------------------------------------------------

    def model_keys(self) -> list[BlockKey]:
        return self.mc_map.snapshot_keys()

    def completeness(self, reference_keys) -> float:
        """Fraction of the reference key set already present locally."""
        reference = set(reference_keys)
        if not reference:
            return 1.0
        local = set(self.mc_map.snapshot_keys())
        return len(local & reference) / len(reference)

    def wait_idle(self, idle_s: float, timeout: float) -> bool:
        """Block until no data has arrived for idle_s seconds."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if time.monotonic() - self.last_data_t >= idle_s:
                return True
            time.sleep(0.02)
        return False

    def request_texture(self) -> None:
        if self.conn is not None:
            self.conn.send(wire.TextureRequest(), wire.Codec.IDENTITY)

    def request_reset(self) -> None:
        if self.conn is not None:
            self.conn.send(wire.ResetRequest(), wire.Codec.IDENTITY)

    def send_pose(self, pose: Pose) -> None:
        if self.conn is not None:
            self.conn.send(wire.PoseUpdate(tuple(pose.to_floats())),
                           wire.Codec.IDENTITY)

    def total_bytes(self) -> tuple[int, int]:
        """(sent, received) bytes across every connection of this client."""
        sent, received = self._past_bytes
        conn = self.conn
        if conn is not None:
            sent += conn.bytes_sent
            received += conn.bytes_received
        return sent, received
