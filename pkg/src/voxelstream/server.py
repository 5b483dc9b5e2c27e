"""Central service: global TSDF + MC models, per-client stream sets, relays.

One reader thread per connection handles that client's messages; writes to
a connection go through its send lock, so per-connection ordering holds end
to end.  Incoming TSDF batches are integrated, the affected MC blocks
(block + seven negative neighbors, deduplicated per batch) recomputed and
queued into every exploration client's stream set, where duplicate inserts
collapse.  Requests drain those sets by the client's chosen strategy.

A delivery lock serializes MC-batch sends against reset processing so that
a delete never races ahead of a stale block already extracted for the same
client; without it a reset could leave an exploration client with a block
the server no longer has.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .concurrent_hash import BlockHashMap, BlockHashSet, BlockKey
from .geometry import CameraIntrinsics, Frustum, Pose
from .mc_encoding import affected_mc_blocks, recompute_mc_block
from .transport import Connection, TcpListener, TransportClosed, WsListener
from .voxel_model import BLOCK_EDGE, TsdfBlock
from . import wire

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    buckets: int = 1 << 20
    excess: int = 1 << 20
    codec: int = wire.Codec.LZ_HIGH
    retention_s: float = 3600.0
    pose_broadcast_hz: float = 20.0
    texture_fanout_all: bool = False  # default: only the requester gets the image
    max_request_blocks: int = 4096
    voxel_size: Optional[float] = None  # adopted from the first client if unset
    metrics_path: Optional[str] = None
    stats_interval_s: float = 1.0


class StreamSet:
    """Per-destination pending-update set with a generation-order side queue.

    The hash set provides deduplicated concurrent insert/extract; the deque
    remembers first-insertion order for the generation-order strategy, and
    extraction validates membership so stale queue entries (already
    extracted or reset away) are skipped.
    """

    def __init__(self, buckets: int = 1 << 16, excess: int = 1 << 16) -> None:
        self._set = BlockHashSet(buckets, excess)
        self._order: deque[BlockKey] = deque()

    def insert(self, key: BlockKey) -> bool:
        if self._set.insert(key):
            self._order.append(key)
            return True
        return False

    def insert_many(self, keys) -> int:
        return sum(self.insert(k) for k in keys)

    def remove(self, key: BlockKey) -> bool:
        return self._set.remove(key)

    def size(self) -> int:
        return self._set.approx_size()

    def snapshot(self) -> list[BlockKey]:
        return self._set.snapshot_keys()

    def extract_random(self, max_n: int) -> list[BlockKey]:
        return self._set.extract_batch(max_n)

    def extract_matching(self, max_n: int, predicate) -> list[BlockKey]:
        return self._set.extract_matching(max_n, predicate)

    def extract_ordered(self, max_n: int) -> list[BlockKey]:
        out: list[BlockKey] = []
        while len(out) < max_n:
            try:
                key = self._order.popleft()
            except IndexError:
                break
            if self._set.remove(key):
                out.append(key)
        return out


@dataclass
class ClientSession:
    client_id: bytes
    role: int
    conn: Optional[Connection]
    stream: Optional[StreamSet]  # exploration clients only
    last_pose: Optional[tuple[float, ...]] = None
    connected: bool = True
    # background senders must not write before the HELLO_ACK is out
    ready: bool = False
    disconnected_at: float = 0.0
    pose_seen: int = -1  # global pose sequence already broadcast to this client
    request_count: int = 0
    blocks_sent: int = 0
    past_bytes: tuple[int, int] = (0, 0)  # sent/received on previous connections

    def send(self, msg: wire.Message, codec: int) -> bool:
        conn = self.conn
        if conn is None:
            return False
        try:
            conn.send(msg, codec)
            return True
        except (TransportClosed, OSError):
            return False

    def total_bytes(self) -> tuple[int, int]:
        sent, received = self.past_bytes
        conn = self.conn
        if conn is not None:
            sent += conn.bytes_sent
            received += conn.bytes_received
        return sent, received


class Server:
    def __init__(self, cfg: ServerConfig = ServerConfig()) -> None:
        self.cfg = cfg
        self.tsdf_map = BlockHashMap(cfg.buckets, cfg.excess)
        self.mc_map = BlockHashMap(cfg.buckets, cfg.excess)
        self.sessions: dict[bytes, ClientSession] = {}
        self._sessions_lock = threading.Lock()
        self._delivery_lock = threading.Lock()
        self._pose_seq = 0
        self._texture_waiters: list[bytes] = []
        self._listeners: list = []
        self._stop = threading.Event()
        self._started_at = time.monotonic()
        self._bg: list[threading.Thread] = []

    # -- lifecycle -----------------------------------------------------------

    def start(
        self,
        tcp: Optional[tuple[str, int]] = ("127.0.0.1", 7801),
        ws: Optional[tuple[str, int]] = None,
    ) -> None:
        if tcp is not None:
            self._listeners.append(TcpListener(tcp[0], tcp[1], self.handle_connection))
        if ws is not None:
            self._listeners.append(WsListener(ws[0], ws[1], self.handle_connection))
        for target, name in (
            (self._pose_broadcast_loop, "pose-broadcast"),
            (self._stats_loop, "stats"),
        ):
            t = threading.Thread(target=target, daemon=True, name=name)
            t.start()
            self._bg.append(t)

    @property
    def tcp_port(self) -> int:
        return self._listeners[0].port

    def stop(self) -> None:
        self._stop.set()
        for listener in self._listeners:
            listener.close()
        with self._sessions_lock:
            sessions = list(self.sessions.values())
        for sess in sessions:
            conn = sess.conn
            if conn is not None:
                conn.close()

    # -- negotiation ----------------------------------------------------------

    def handle_connection(self, conn: Connection) -> None:
        try:
            msg = conn.recv()
        except (TransportClosed, wire.WireError):
            conn.close()
            return
        if not isinstance(msg, wire.Hello):
            conn.close()
            return
        if self.cfg.voxel_size is None:
            self.cfg.voxel_size = msg.voxel_size
        mismatch = (
            abs(msg.voxel_size - self.cfg.voxel_size) > 1e-9
            or msg.block_edge != BLOCK_EDGE
        )
        if mismatch:
            try:
                conn.send(
                    wire.HelloAck(1, self.cfg.voxel_size or 0.0, BLOCK_EDGE, 0),
                    wire.Codec.IDENTITY,
                )
            except (TransportClosed, OSError):
                pass
            conn.close()
            return

        sess = self._attach_session(msg, conn)
        pending = sess.stream.size() if sess.stream is not None else 0
        if not sess.send(
            wire.HelloAck(0, self.cfg.voxel_size, BLOCK_EDGE, pending),
            wire.Codec.IDENTITY,
        ):
            self._detach(sess, conn)
            return
        sess.ready = True
        self._read_loop(sess, conn)

    def _attach_session(self, hello: wire.Hello, conn: Connection) -> ClientSession:
        now = time.monotonic()
        with self._sessions_lock:
            sess = self.sessions.get(hello.client_id)
            if sess is not None and (
                sess.connected or now - sess.disconnected_at <= self.cfg.retention_s
            ):
                # returning client: its stream set kept accumulating updates
                sess.ready = False
                old = sess.conn
                if old is not None:
                    sess.past_bytes = (
                        sess.past_bytes[0] + old.bytes_sent,
                        sess.past_bytes[1] + old.bytes_received,
                    )
                    old.close()
                sess.conn = conn
                sess.connected = True
                return sess
            stream = None
            if hello.role == wire.Role.EXPLORATION:
                stream = StreamSet(min(self.cfg.buckets, 1 << 16),
                                   min(self.cfg.excess, 1 << 16))
            sess = ClientSession(hello.client_id, hello.role, conn, stream)
            self.sessions[hello.client_id] = sess
        if stream is not None:
            # fresh exploration client starts with the complete model queued
            stream.insert_many(self.mc_map.snapshot_keys())
        return sess

    def _detach(self, sess: ClientSession, conn: Connection) -> None:
        with self._sessions_lock:
            if sess.conn is conn:
                sess.past_bytes = (
                    sess.past_bytes[0] + conn.bytes_sent,
                    sess.past_bytes[1] + conn.bytes_received,
                )
                sess.conn = None
                sess.connected = False
                sess.disconnected_at = time.monotonic()
        conn.close()

    def _read_loop(self, sess: ClientSession, conn: Connection) -> None:
        while not self._stop.is_set():
            try:
                msg = conn.recv()
            except (TransportClosed, wire.WireError):
                break
            try:
                self._dispatch(sess, msg)
            except Exception:
                log.exception("error handling %s from %s",
                              type(msg).__name__, sess.client_id.hex()[:8])
        self._detach(sess, conn)

    def _dispatch(self, sess: ClientSession, msg: wire.Message) -> None:
        if isinstance(msg, wire.TsdfBatch):
            self.on_tsdf_batch(msg)
        elif isinstance(msg, wire.BlockRequest):
            self.on_block_request(sess, msg)
        elif isinstance(msg, wire.PoseUpdate):
            self.on_pose_update(sess, msg.pose)
        elif isinstance(msg, wire.ResetRequest):
            self.on_reset_request(sess)
        elif isinstance(msg, wire.ResetBlocks):
            self.on_reset_blocks(msg.keys)
        elif isinstance(msg, wire.TextureRequest):
            self.on_texture_request(sess)
        elif isinstance(msg, wire.TextureImage):
            self.on_texture_image(msg)
        elif isinstance(msg, wire.Stats):
            pass  # informational
        else:
            log.warning("unexpected %s from %s", type(msg).__name__,
                        sess.client_id.hex()[:8])

    # -- model updates ---------------------------------------------------------

    def on_tsdf_batch(self, batch: wire.TsdfBatch) -> None:
        updated = []
        for key, raw in batch.blocks:
            self.tsdf_map.put(key, TsdfBlock.from_bytes(key, raw))
            updated.append(key)
        affected: dict[BlockKey, None] = {}
        for key in updated:
            for nb in affected_mc_blocks(key):
                affected[nb] = None
        recomputed = []
        for key in affected:
            # stored pre-serialized: the request path only concatenates
            mc = recompute_mc_block(key, self.tsdf_map.get)
            self.mc_map.put(key, mc.to_bytes())
            recomputed.append(key)
        for ec in self._exploration_sessions():
            ec.stream.insert_many(recomputed)

    def _exploration_sessions(self) -> list[ClientSession]:
        with self._sessions_lock:
            return [
                s
                for s in self.sessions.values()
                if s.role == wire.Role.EXPLORATION and s.stream is not None
            ]

    def _rc_session(self) -> Optional[ClientSession]:
        with self._sessions_lock:
            for s in self.sessions.values():
                if s.role == wire.Role.RECONSTRUCTION and s.connected:
                    return s
        return None

    # -- block requests ----------------------------------------------------------

    def on_block_request(self, sess: ClientSession, req: wire.BlockRequest) -> None:
        if sess.stream is None:
            return
        n = min(req.max_blocks, self.cfg.max_request_blocks)
        strategy = req.strategy
        if strategy == wire.Strategy.VISIBLE_FIRST:
            keys = sess.stream.extract_matching(
                n, self._visibility_predicate(req)
            )
            if len(keys) < n:  # top up so requests stay full-sized
                keys.extend(sess.stream.extract_random(n - len(keys)))
        elif strategy == wire.Strategy.GENERATION_ORDER:
            keys = sess.stream.extract_ordered(n)
        else:
            keys = sess.stream.extract_random(n)

        sess.request_count += 1
        with self._delivery_lock:
            blocks = []
            for key in keys:
                raw = self.mc_map.get(key)
                if raw is None:
                    continue  # deleted by a reset meanwhile
                blocks.append((key, raw))
            ok = sess.send(wire.McBatch(blocks), self.cfg.codec)
        if ok:
            sess.blocks_sent += len(blocks)
        else:
            # connection died mid-delivery: nothing may be lost
            sess.stream.insert_many(keys)

    def _visibility_predicate(self, req: wire.BlockRequest):
        voxel = self.cfg.voxel_size or 0.005
        block_size = BLOCK_EDGE * voxel
        fx, fy, cx, cy, near, far = req.intrinsics
        pose = Pose.from_floats(req.pose)
        intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                width=int(2 * cx) or 640, height=int(2 * cy) or 480)
        frustum = Frustum(pose, intr, near=max(near, 1e-3), far=far,
                          margin=block_size)
        planes = frustum._planes

        def predicate(key: BlockKey) -> bool:
            x0, y0, z0 = (key[0] * block_size, key[1] * block_size,
                          key[2] * block_size)
            for nx, ny, nz, d in planes:
                px = x0 + block_size if nx >= 0 else x0
                py = y0 + block_size if ny >= 0 else y0
                pz = z0 + block_size if nz >= 0 else z0
                if nx * px + ny * py + nz * pz + d < -frustum.margin:
                    return False
            return True

        return predicate

    # -- pose exchange -------------------------------------------------------------

    def on_pose_update(self, sess: ClientSession, pose: tuple[float, ...]) -> None:
        sess.last_pose = pose
        self._pose_seq += 1

    def _pose_broadcast_loop(self) -> None:
        interval = 1.0 / self.cfg.pose_broadcast_hz
        while not self._stop.wait(interval):
            seq = self._pose_seq
            with self._sessions_lock:
                sessions = [s for s in self.sessions.values()
                            if s.connected and s.ready]
            for sess in sessions:
                if sess.pose_seen >= seq:
                    continue
                entries = [
                    (o.client_id, o.role, o.last_pose)
                    for o in sessions
                    if o is not sess and o.last_pose is not None
                ]
                if not entries:
                    continue
                if sess.send(wire.PoseBroadcast(entries), wire.Codec.IDENTITY):
                    sess.pose_seen = seq

    # -- resets ----------------------------------------------------------------------

    def on_reset_request(self, sess: ClientSession) -> None:
        rc = self._rc_session()
        if rc is None:
            sess.send(wire.Stats(1, note="no reconstruction client"),
                      wire.Codec.IDENTITY)
            return
        rc.send(wire.ResetRequest(), wire.Codec.IDENTITY)

    def on_reset_blocks(self, keys: list[BlockKey]) -> None:
        if not keys:
            return
        ecs = self._exploration_sessions()
        with self._delivery_lock:
            for key in keys:
                self.tsdf_map.remove(key)
                self.mc_map.remove(key)
            for ec in ecs:
                for key in keys:
                    ec.stream.remove(key)
                ec.send(wire.DeleteBlocks(keys), self.cfg.codec)

    # -- texture relay ------------------------------------------------------------------

    def on_texture_request(self, sess: ClientSession) -> None:
        rc = self._rc_session()
        if rc is None:
            sess.send(wire.Stats(1, note="no reconstruction client"),
                      wire.Codec.IDENTITY)
            return
        with self._sessions_lock:
            if sess.client_id not in self._texture_waiters:
                self._texture_waiters.append(sess.client_id)
        rc.send(wire.TextureRequest(), wire.Codec.IDENTITY)

    def on_texture_image(self, img: wire.TextureImage) -> None:
        with self._sessions_lock:
            waiters, self._texture_waiters = self._texture_waiters, []
        if self.cfg.texture_fanout_all:
            targets = self._exploration_sessions()
        else:
            with self._sessions_lock:
                targets = [
                    self.sessions[cid] for cid in waiters if cid in self.sessions
                ]
        for sess in targets:
            sess.send(img, self.cfg.codec)

    # -- stats / metrics -------------------------------------------------------------------

    def model_sizes(self) -> tuple[int, int]:
        return self.tsdf_map.approx_size(), self.mc_map.approx_size()

    def _stats_loop(self) -> None:
        metrics = None
        if self.cfg.metrics_path:
            metrics = open(self.cfg.metrics_path, "w")
            metrics.write(
                "t_s,tsdf_blocks,mc_blocks,rc_rx_bytes,ec_tx_bytes,pending_total,sessions\n"
            )
        try:
            while not self._stop.wait(self.cfg.stats_interval_s):
                tsdf_n, mc_n = self.model_sizes()
                now_us = int(time.monotonic() * 1e6)
                rc_rx = 0
                ec_tx = 0
                pending = 0
                with self._sessions_lock:
                    sessions = list(self.sessions.values())
                for sess in sessions:
                    sent, received = sess.total_bytes()
                    if sess.role == wire.Role.RECONSTRUCTION:
                        rc_rx += received
                    else:
                        ec_tx += sent
                    if sess.stream is not None:
                        pending += sess.stream.size()
                    if sess.connected and sess.ready and sess.role == wire.Role.EXPLORATION:
                        sess.send(
                            wire.Stats(
                                0,
                                model_blocks=mc_n,
                                pending=sess.stream.size() if sess.stream else 0,
                                time_us=now_us,
                            ),
                            wire.Codec.IDENTITY,
                        )
                if metrics:
                    metrics.write(
                        f"{time.monotonic() - self._started_at:.3f},{tsdf_n},{mc_n},"
                        f"{rc_rx},{ec_tx},{pending},{len(sessions)}\n"
                    )
                    metrics.flush()
        finally:
            if metrics:
                metrics.close()

    def link_totals(self) -> tuple[int, int]:
        """(bytes received from RCs, bytes sent to ECs) so far."""
        rc_rx = 0
        ec_tx = 0
        with self._sessions_lock:
            sessions = list(self.sessions.values())
        for sess in sessions:
            sent, received = sess.total_bytes()
            if sess.role == wire.Role.RECONSTRUCTION:
                rc_rx += received
            else:
                ec_tx += sent
        return rc_rx, ec_tx
