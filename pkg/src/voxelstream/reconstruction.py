"""Reconstruction client: fuses posed RGB-D frames and feeds the server.

Streaming is gated on retirement: a block is queued only once it leaves
the padded sensor frustum, so actively changing blocks are not re-sent
every frame.  An exponential moving average of the stream-set size decides
when to flush still-visible blocks early (sensor idling), and the end of
the sequence always flushes, so the remote model converges to the local
one.

The EMA operator is the irregular-time-series form: with a = dt/tau,
u = exp(-a) and v = (1-u)/a, the update is

    value <- u*value + (v-u)*s_prev + (1-v)*s_next

whose coefficients sum to one, so a constant signal is a fixed point.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .concurrent_hash import BlockKey
from .dataset import Frame
from .geometry import CameraIntrinsics, Pose
from .server import StreamSet
from .transport import TransportClosed, connect_tcp
from .voxel_model import FusionConfig, VoxelModel
from . import wire

log = logging.getLogger(__name__)


@dataclass
class EmaState:
    value: float = 0.0
    tau: float = 5.0
    last_t: float = 0.0
    threshold: float = 64.0
    last_prefetch_t: float = 0.0
    cooldown: float = 5.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def ema_update(state: EmaState, t_next: float, s_n: float, s_next: float) -> float:
    """Advance the EMA from state.last_t to t_next given the two samples."""
    if t_next <= state.last_t:
        raise ValueError(f"non-increasing timestamp {t_next} <= {state.last_t}")
    a = (t_next - state.last_t) / state.tau
    u = math.exp(-a)
    v = (1.0 - u) / a
    state.value = u * state.value + (v - u) * s_n + (1.0 - v) * s_next
    state.last_t = t_next
    return state.value


def maybe_prefetch(
    state: EmaState,
    now: float,
    visible_blocks: Iterable[BlockKey],
    stream: StreamSet,
) -> list[BlockKey]:
    """Queue the visible blocks when the pending set has drained.

    Fires when the EMA is under the threshold and the previous prefetch is
    at least the cooldown ago; duplicates collapse in the stream set.
    """
    if state.value >= state.threshold:
        return []
    if now - state.last_prefetch_t < state.cooldown:
        return []
    state.last_prefetch_t = now
    queued = list(visible_blocks)
    stream.insert_many(queued)
    return queued


@dataclass
class RcConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    package_size: int = 512
    send_rate_hz: float = 100.0
    codec: int = wire.Codec.LZ_HIGH
    speed: float = 1.0  # dataset pacing multiplier; 0 = no pacing
    ema_tau: float = 5.0
    ema_threshold: float = 64.0
    prefetch_cooldown: float = 5.0
    frustum_near: float = 0.05
    frustum_far: float = 20.0
    buckets: int = 1 << 17
    excess: int = 1 << 17

    def __post_init__(self) -> None:
        if self.package_size < 1:
            raise ValueError("package_size must be >= 1")


class ReconstructionClient:
    """Owns the local model, the stream gate, and the server link."""

    def __init__(self, cfg: RcConfig, client_id: Optional[bytes] = None) -> None:
        self.cfg = cfg
        self.client_id = client_id or np.random.bytes(16)
        self.model = VoxelModel(cfg.fusion, cfg.buckets, cfg.excess)
        self.stream = StreamSet(min(cfg.buckets, 1 << 16), min(cfg.excess, 1 << 16))
        self.ema = EmaState(
            tau=cfg.ema_tau,
            threshold=cfg.ema_threshold,
            cooldown=cfg.prefetch_cooldown,
        )
        self._s_prev = 0.0
        self.conn = None
        self._server_addr: Optional[tuple[str, int]] = None
        self._stop = threading.Event()
        self._sender: Optional[threading.Thread] = None
        self._receiver: Optional[threading.Thread] = None
        self._frames_seen = 0
        self._last_frame: Optional[Frame] = None
        self._last_intrinsics: Optional[CameraIntrinsics] = None
        self._frame_lock = threading.Lock()
        self.blocks_streamed = 0
        self.keys_ever_queued: set[BlockKey] = set()

    # -- connection -----------------------------------------------------------

    def connect(self, host: str, port: int) -> None:
        self._server_addr = (host, port)
        self.conn = connect_tcp(host, port)
        self.conn.send(
            wire.Hello(wire.Role.RECONSTRUCTION, self.client_id,
                       self.cfg.fusion.voxel_size),
            wire.Codec.IDENTITY,
        )
        ack = self.conn.recv()
        if not isinstance(ack, wire.HelloAck) or ack.status != 0:
            raise RuntimeError(f"server rejected session: {ack}")
        self._receiver = threading.Thread(target=self._receive_loop, daemon=True,
                                          name="rc-recv")
        self._receiver.start()
        self._sender = threading.Thread(target=self._send_loop, daemon=True,
                                        name="rc-send")
        self._sender.start()

    def _reconnect(self) -> bool:
        if self._server_addr is None or self._stop.is_set():
            return False
        host, port = self._server_addr
        for delay in (0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 4.0, 4.0):
            if self._stop.is_set():
                return False
            try:
                conn = connect_tcp(host, port)
                conn.send(
                    wire.Hello(wire.Role.RECONSTRUCTION, self.client_id,
                               self.cfg.fusion.voxel_size),
                    wire.Codec.IDENTITY,
                )
                ack = conn.recv()
                if isinstance(ack, wire.HelloAck) and ack.status == 0:
                    self.conn = conn
                    return True
                conn.close()
                return False
            except (OSError, TransportClosed, wire.WireError):
                time.sleep(delay)
        return False

    def close(self) -> None:
        self._stop.set()
        if self.conn is not None:
            self.conn.close()

    # -- frame pipeline ----------------------------------------------------------

    def process_frame(self, frame: Frame, intrinsics: CameraIntrinsics) -> list[BlockKey]:
        """Allocate, fuse, retire, queue, and run the prefetch check.

        Returns the keys queued for streaming by this frame (retired plus
        any prefetch flush).
        """
        cfg = self.cfg
        with self._frame_lock:
            self._last_frame = frame
            self._last_intrinsics = intrinsics
        self.model.allocate_blocks(frame.depth, frame.pose, intrinsics)
        self.model.integrate_frame(frame.depth, frame.color, frame.pose, intrinsics)
        frustum = self.model.sensor_frustum(
            frame.pose, intrinsics, near=cfg.frustum_near, far=cfg.frustum_far
        )
        retired = self.model.retire_invisible(frustum)
        self.stream.insert_many(retired)
        queued = list(retired)

        t = frame.timestamp_us / 1e6
        if self._frames_seen == 0:
            self.ema.last_t = t - 1e-3
            self.ema.last_prefetch_t = t
        s_next = float(self.stream.size())
        if t > self.ema.last_t:
            ema_update(self.ema, t, self._s_prev, s_next)
        self._s_prev = s_next
        self._frames_seen += 1

        queued.extend(
            maybe_prefetch(self.ema, t, self.model.visible_updated_keys(), self.stream)
        )
        self.keys_ever_queued.update(queued)
        if self.conn is not None:
            try:
                self.conn.send(wire.PoseUpdate(tuple(frame.pose.to_floats())),
                               wire.Codec.IDENTITY)
            except (TransportClosed, OSError):
                pass
        return queued

    def final_flush(self) -> list[BlockKey]:
        """End of acquisition: queue everything still visible and updated."""
        remaining = self.model.visible_updated_keys()
        self.stream.insert_many(remaining)
        self.keys_ever_queued.update(remaining)
        return remaining

    def run_sequence(self, intrinsics: CameraIntrinsics, frames: Iterable[Frame]) -> None:
        """Replay a frame stream, paced by its timestamps times 1/speed."""
        started = time.monotonic()
        t0_us: Optional[int] = None
        for frame in frames:
            if self._stop.is_set():
                break
            if self.cfg.speed > 0:
                if t0_us is None:
                    t0_us = frame.timestamp_us
                due = started + (frame.timestamp_us - t0_us) / 1e6 / self.cfg.speed
                delay = due - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            self.process_frame(frame, intrinsics)
        self.final_flush()

    def drain(self, timeout: float = 60.0) -> bool:
        """Wait until every queued block has been sent."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.stream.size() == 0:
                return True
            time.sleep(0.02)
        return False

    # -- streaming ------------------------------------------------------------------

    def pump_once(self) -> int:
        """One send-side tick: extract a package, ship it, re-queue on failure."""
        keys = self.stream.extract_random(self.cfg.package_size)
        if not keys:
            return 0
        blocks = []
        for key in keys:
            blk = self.model.get_block(key)
            if blk is None:
                continue  # deleted since queuing (reset)
            blocks.append((key, blk.to_bytes()))
        if not blocks:
            return 0
        conn = self.conn
        try:
            if conn is None:
                raise TransportClosed("not connected")
            conn.send(wire.TsdfBatch(blocks), self.cfg.codec)
        except (TransportClosed, OSError):
            self.stream.insert_many(keys)  # nothing may be lost
            raise
        self.blocks_streamed += len(blocks)
        return len(blocks)

    def _send_loop(self) -> None:
        interval = 1.0 / self.cfg.send_rate_hz
        while not self._stop.is_set():
            start = time.monotonic()
            try:
                self.pump_once()
            except (TransportClosed, OSError):
                if not self._reconnect():
                    time.sleep(0.2)
            sleep = interval - (time.monotonic() - start)
            if sleep > 0:
                time.sleep(sleep)

    # -- serving requests --------------------------------------------------------------

    def _receive_loop(self) -> None:
        while not self._stop.is_set():
            conn = self.conn
            if conn is None:
                time.sleep(0.05)
                continue
            try:
                msg = conn.recv()
            except (TransportClosed, wire.WireError):
                time.sleep(0.05)
                continue
            try:
                if isinstance(msg, wire.ResetRequest):
                    self.handle_reset_request()
                elif isinstance(msg, wire.TextureRequest):
                    self.handle_texture_request()
                elif isinstance(msg, (wire.PoseBroadcast, wire.Stats, wire.HelloAck)):
                    pass
            except Exception:
                log.exception("error serving %s", type(msg).__name__)

    def handle_reset_request(self) -> list[BlockKey]:
        """Delete the currently visible region locally and tell the server."""
        visible = self.model.visible_updated_keys()
        if not visible:
            return []
        self.model.delete_blocks(visible)
        for key in visible:
            self.stream.remove(key)
        if self.conn is not None:
            try:
                self.conn.send(wire.ResetBlocks(visible), self.cfg.codec)
            except (TransportClosed, OSError):
                pass
        return visible

    def handle_texture_request(self) -> bool:
        with self._frame_lock:
            frame = self._last_frame
            intr = self._last_intrinsics
        if frame is None or self.conn is None:
            if self.conn is not None:
                try:
                    self.conn.send(wire.Stats(2, note="no frame yet"),
                                   wire.Codec.IDENTITY)
                except (TransportClosed, OSError):
                    pass
            return False
        img = wire.TextureImage(
            tuple(frame.pose.to_floats()),
            (intr.fx, intr.fy, intr.cx, intr.cy),
            intr.width,
            intr.height,
            np.ascontiguousarray(frame.color, dtype=np.uint8).tobytes(),
        )
        try:
            self.conn.send(img, self.cfg.codec)
            return True
        except (TransportClosed, OSError):
            return False
