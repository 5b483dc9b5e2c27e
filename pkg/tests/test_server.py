"""Server: negotiation, stream-set semantics, strategies, relays, resets."""

import os
import threading
import time

import numpy as np
import pytest

from voxelstream import wire
from voxelstream.geometry import Pose
from voxelstream.mc_encoding import affected_mc_blocks
from voxelstream.server import ClientSession, Server, ServerConfig, StreamSet
from voxelstream.transport import TransportClosed, connect_tcp
from voxelstream.voxel_model import TsdfBlock


def make_server(**kw):
    kw.setdefault("buckets", 1 << 12)
    kw.setdefault("excess", 1 << 12)
    kw.setdefault("codec", wire.Codec.DEFLATE)
    kw.setdefault("voxel_size", 0.01)
    srv = Server(ServerConfig(**kw))
    srv.start(tcp=("127.0.0.1", 0))
    return srv


def hello(conn, role=wire.Role.EXPLORATION, client_id=None, voxel=0.01, edge=8):
    cid = client_id or os.urandom(16)
    conn.send(wire.Hello(role, cid, voxel, edge), wire.Codec.IDENTITY)
    return cid, conn.recv()


def tsdf_payload(key, seed=0):
    rng = np.random.default_rng(seed)
    blk = TsdfBlock(key)
    blk.tsdf = rng.uniform(-1, 1, 512).astype(np.float32)
    blk.weight = np.ones(512, dtype=np.float32)
    blk.color = rng.integers(0, 256, (512, 3)).astype(np.uint8)
    return blk.to_bytes()


class RecordingConn:
    """Stands in for a transport connection in direct-call tests."""

    def __init__(self):
        self.sent = []
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg, codec=0):
        self.sent.append(msg)
        self.bytes_sent += len(wire.encode_message(msg, codec))

    def close(self):
        pass

    def of_type(self, cls):
        return [m for m in self.sent if isinstance(m, cls)]


def attach_ec(srv, client_id=None):
    cid = client_id or os.urandom(16)
    conn = RecordingConn()
    sess = srv._attach_session(wire.Hello(wire.Role.EXPLORATION, cid, 0.01), conn)
    sess.ready = True
    return sess, conn


class TestNegotiation:
    def test_fresh_exploration_client_gets_full_model(self):
        srv = make_server()
        try:
            for i in range(10):
                srv.mc_map.put((i, 0, 0), None)
            conn = connect_tcp("127.0.0.1", srv.tcp_port)
            _, ack = hello(conn)
            assert ack.status == 0
            assert ack.pending_count == 10
            conn.close()
        finally:
            srv.stop()

    def test_voxel_size_mismatch_rejected(self):
        srv = make_server()
        try:
            conn = connect_tcp("127.0.0.1", srv.tcp_port)
            _, ack = hello(conn, voxel=0.005)
            assert ack.status == 1
            conn.close()
        finally:
            srv.stop()

    def test_block_edge_mismatch_rejected(self):
        srv = make_server()
        try:
            conn = connect_tcp("127.0.0.1", srv.tcp_port)
            _, ack = hello(conn, edge=16)
            assert ack.status == 1
            conn.close()
        finally:
            srv.stop()

    def test_returning_id_keeps_pending_updates(self):
        srv = make_server()
        try:
            conn = connect_tcp("127.0.0.1", srv.tcp_port)
            cid, ack = hello(conn)
            assert ack.pending_count == 0
            conn.close()
            time.sleep(0.1)
            # 5 blocks arrive during the outage
            for i in range(5):
                srv.on_tsdf_batch(wire.TsdfBatch([((i, 5, 0), tsdf_payload((i, 5, 0)))]))
            conn2 = connect_tcp("127.0.0.1", srv.tcp_port)
            _, ack2 = hello(conn2, client_id=cid)
            pending = ack2.pending_count
            # every updated block and its recomputed neighbors are pending
            expected = set()
            for i in range(5):
                expected.update(affected_mc_blocks((i, 5, 0)))
            assert pending == len(expected)
            conn2.close()
        finally:
            srv.stop()

    def test_retention_expiry_treated_as_fresh(self):
        srv = make_server(retention_s=0.05)
        try:
            for i in range(3):
                srv.mc_map.put((i, 0, 0), None)
            conn = connect_tcp("127.0.0.1", srv.tcp_port)
            cid, _ = hello(conn)
            # drain the pending set so a retained session would show 0
            sess = srv.sessions[cid]
            sess.stream.extract_random(100)
            conn.close()
            time.sleep(0.3)  # past retention
            conn2 = connect_tcp("127.0.0.1", srv.tcp_port)
            _, ack = hello(conn2, client_id=cid)
            assert ack.pending_count == 3  # refilled from the whole model
            conn2.close()
        finally:
            srv.stop()


class TestTsdfIngestion:
    def test_no_exploration_clients(self):
        srv = make_server()
        try:
            srv.on_tsdf_batch(wire.TsdfBatch([((0, 0, 0), tsdf_payload((0, 0, 0)))]))
            assert srv.tsdf_map.approx_size() == 1
            assert srv.mc_map.approx_size() == 8  # block + 7 negative neighbors
        finally:
            srv.stop()

    def test_three_clients_each_gain_affected_set(self):
        srv = make_server()
        try:
            sessions = [attach_ec(srv)[0] for _ in range(3)]
            srv.on_tsdf_batch(wire.TsdfBatch([((4, 4, 4), tsdf_payload((4, 4, 4)))]))
            expected = set(affected_mc_blocks((4, 4, 4)))
            for sess in sessions:
                got = set(sess.stream.snapshot())
                assert got == expected
                assert len(got) <= 8
        finally:
            srv.stop()

    def test_duplicate_upload_keeps_single_pending_entry(self):
        srv = make_server()
        try:
            sess, _ = attach_ec(srv)
            batch = wire.TsdfBatch([((1, 1, 1), tsdf_payload((1, 1, 1)))])
            srv.on_tsdf_batch(batch)
            first = set(sess.stream.snapshot())
            srv.on_tsdf_batch(batch)  # same block again, still undelivered
            assert set(sess.stream.snapshot()) == first
        finally:
            srv.stop()

    def test_latest_write_wins(self):
        srv = make_server()
        try:
            key = (2, 2, 2)
            srv.on_tsdf_batch(wire.TsdfBatch([(key, tsdf_payload(key, seed=1))]))
            second = tsdf_payload(key, seed=2)
            srv.on_tsdf_batch(wire.TsdfBatch([(key, second)]))
            assert srv.tsdf_map.get(key).to_bytes() == second
        finally:
            srv.stop()


class TestBlockRequests:
    def _loaded_server(self, n=30):
        srv = make_server()
        blocks = [((i, 0, 0), tsdf_payload((i, 0, 0), seed=i)) for i in range(n)]
        srv.on_tsdf_batch(wire.TsdfBatch(blocks))
        return srv

    def test_empty_stream_set_returns_empty_batch(self):
        srv = make_server()
        try:
            sess, conn = attach_ec(srv)
            srv.on_block_request(sess, wire.BlockRequest(10, wire.Strategy.RANDOM))
            (batch,) = conn.of_type(wire.McBatch)
            assert batch.blocks == []
        finally:
            srv.stop()

    def test_small_set_fully_drained(self):
        srv = make_server()
        try:
            sess, conn = attach_ec(srv)
            for i in range(5):
                srv.on_tsdf_batch(
                    wire.TsdfBatch([((i, 9, 0), tsdf_payload((i, 9, 0)))])
                )
            pending = sess.stream.size()
            srv.on_block_request(sess, wire.BlockRequest(1000, wire.Strategy.RANDOM))
            (batch,) = conn.of_type(wire.McBatch)
            assert len(batch.blocks) == pending
            assert sess.stream.size() == 0
        finally:
            srv.stop()

    def test_generation_order_strategy(self):
        srv = self._loaded_server(20)
        try:
            sess, conn = attach_ec(srv)
            # replace the negotiation fill with a known insertion order
            sess.stream = StreamSet(64, 64)
            order = [(i, 0, 0) for i in range(20)]
            sess.stream.insert_many(order)
            srv.on_block_request(sess, wire.BlockRequest(7, wire.Strategy.GENERATION_ORDER))
            srv.on_block_request(sess, wire.BlockRequest(7, wire.Strategy.GENERATION_ORDER))
            batches = conn.of_type(wire.McBatch)
            got = [k for b in batches for k, _ in b.blocks]
            assert got == order[:14]
        finally:
            srv.stop()

    def test_visible_first_partitions_before_topup(self):
        srv = self._loaded_server(0)
        try:
            # blocks at z=+1m are in view of an identity pose; z=-1m behind
            front = [(0, 0, 12), (1, 0, 12), (0, 1, 12)]
            back = [(0, 0, -12), (1, 0, -12), (0, 1, -12)]
            for k in front + back:
                srv.on_tsdf_batch(wire.TsdfBatch([(k, tsdf_payload(k))]))
            sess, conn = attach_ec(srv)
            pending_front = {k for k in sess.stream.snapshot() if k[2] >= 0}
            req = wire.BlockRequest(
                len(pending_front),
                wire.Strategy.VISIBLE_FIRST,
                tuple(Pose.identity().to_floats()),
                (100.0, 100.0, 50.0, 50.0, 0.05, 20.0),
            )
            srv.on_block_request(sess, req)
            (batch,) = conn.of_type(wire.McBatch)
            got = {k for k, _ in batch.blocks}
            assert got
            assert all(k[2] >= 0 for k in got), "unrequested invisible blocks sent"
            # remaining requests drain the rest
            srv.on_block_request(sess, wire.BlockRequest(1000, wire.Strategy.RANDOM))
            assert sess.stream.size() == 0
        finally:
            srv.stop()

    def test_visible_first_tops_up_to_full_size(self):
        srv = self._loaded_server(0)
        try:
            front = [(0, 0, 12)]
            back = [(0, 0, -12), (1, 0, -12)]
            for k in front + back:
                srv.on_tsdf_batch(wire.TsdfBatch([(k, tsdf_payload(k))]))
            sess, conn = attach_ec(srv)
            total = sess.stream.size()
            req = wire.BlockRequest(
                total,
                wire.Strategy.VISIBLE_FIRST,
                tuple(Pose.identity().to_floats()),
                (100.0, 100.0, 50.0, 50.0, 0.05, 20.0),
            )
            srv.on_block_request(sess, req)
            (batch,) = conn.of_type(wire.McBatch)
            assert len(batch.blocks) == total  # topped up with invisible ones
        finally:
            srv.stop()

    def test_failed_send_requeues_extraction(self):
        srv = self._loaded_server(10)
        try:
            sess, _ = attach_ec(srv)

            class Dead(RecordingConn):
                def send(self, msg, codec=0):
                    raise TransportClosed("gone")

            pending = sess.stream.size()
            sess.conn = Dead()
            srv.on_block_request(sess, wire.BlockRequest(1000, wire.Strategy.RANDOM))
            assert sess.stream.size() == pending
        finally:
            srv.stop()


class TestPoseRelay:
    def test_two_explorers_see_each_other_and_rc(self):
        srv = make_server(pose_broadcast_hz=50.0)
        try:
            rc_sess = ClientSession(os.urandom(16), wire.Role.RECONSTRUCTION,
                                    RecordingConn(), None, ready=True)
            srv.sessions[rc_sess.client_id] = rc_sess
            ec1, conn1 = attach_ec(srv)
            ec2, conn2 = attach_ec(srv)
            srv.on_pose_update(rc_sess, tuple(float(i) for i in range(12)))
            srv.on_pose_update(ec1, tuple(float(i + 1) for i in range(12)))
            srv.on_pose_update(ec2, tuple(float(i + 2) for i in range(12)))
            time.sleep(0.2)
            for sess, conn in ((ec1, conn1), (ec2, conn2)):
                casts = conn.of_type(wire.PoseBroadcast)
                assert casts
                ids = {cid for cid, _, _ in casts[-1].entries}
                assert sess.client_id not in ids  # own pose excluded
                assert len(casts[-1].entries) == 2
        finally:
            srv.stop()

    def test_single_client_no_broadcast(self):
        srv = make_server(pose_broadcast_hz=50.0)
        try:
            ec, conn = attach_ec(srv)
            srv.on_pose_update(ec, tuple(float(i) for i in range(12)))
            time.sleep(0.15)
            assert conn.of_type(wire.PoseBroadcast) == []
        finally:
            srv.stop()

    def test_broadcast_rate_capped_at_20hz(self):
        srv = make_server(pose_broadcast_hz=20.0)
        try:
            ec1, conn1 = attach_ec(srv)
            ec2, _ = attach_ec(srv)
            end = time.monotonic() + 1.0
            n = 0
            while time.monotonic() < end:
                srv.on_pose_update(ec2, tuple(float(n + i) for i in range(12)))
                n += 1
                time.sleep(0.01)
            assert n >= 90  # ~100 updates in the second
            casts = conn1.of_type(wire.PoseBroadcast)
            assert 1 <= len(casts) <= 22  # coalesced to the broadcast rate
        finally:
            srv.stop()


class TestReset:
    def test_empty_reset_suppressed(self):
        srv = make_server()
        try:
            _, conn = attach_ec(srv)
            srv.on_reset_blocks([])
            assert conn.of_type(wire.DeleteBlocks) == []
        finally:
            srv.stop()

    def test_reset_removes_everywhere_and_broadcasts(self):
        srv = make_server()
        try:
            sess, conn = attach_ec(srv)
            keys = [(i, 3, 3) for i in range(4)]
            for k in keys:
                srv.on_tsdf_batch(wire.TsdfBatch([(k, tsdf_payload(k))]))
            assert sess.stream.size() > 0
            victims = keys[:2]
            srv.on_reset_blocks(victims)
            for k in victims:
                assert srv.tsdf_map.get(k) is None
                assert srv.mc_map.get(k) is None
                assert not sess.stream.remove(k)  # already gone
            (deletion,) = conn.of_type(wire.DeleteBlocks)
            assert set(deletion.keys) == set(victims)
        finally:
            srv.stop()

    def test_reset_of_absent_keys_is_noop_for_stream(self):
        srv = make_server()
        try:
            sess, _ = attach_ec(srv)
            srv.on_tsdf_batch(wire.TsdfBatch([((0, 7, 0), tsdf_payload((0, 7, 0)))]))
            before = set(sess.stream.snapshot())
            srv.on_reset_blocks([(99, 99, 99)])
            assert set(sess.stream.snapshot()) == before
        finally:
            srv.stop()

    def test_reset_request_forwarded_to_rc(self):
        srv = make_server()
        try:
            rc_conn = RecordingConn()
            rc_sess = ClientSession(os.urandom(16), wire.Role.RECONSTRUCTION,
                                    rc_conn, None, ready=True)
            srv.sessions[rc_sess.client_id] = rc_sess
            ec, _ = attach_ec(srv)
            srv.on_reset_request(ec)
            assert len(rc_conn.of_type(wire.ResetRequest)) == 1
        finally:
            srv.stop()

    def test_reset_request_without_rc_reports_error(self):
        srv = make_server()
        try:
            ec, conn = attach_ec(srv)
            srv.on_reset_request(ec)
            (stat,) = conn.of_type(wire.Stats)
            assert stat.code == 1
        finally:
            srv.stop()


class TestTextureRelay:
    def _image(self):
        return wire.TextureImage(tuple(float(i) for i in range(12)),
                                 (1.0, 1.0, 0.0, 0.0), 2, 2, bytes(12))

    def test_request_with_rc_roundtrip(self):
        srv = make_server()
        try:
            rc_conn = RecordingConn()
            rc_sess = ClientSession(os.urandom(16), wire.Role.RECONSTRUCTION,
                                    rc_conn, None, ready=True)
            srv.sessions[rc_sess.client_id] = rc_sess
            ec, conn = attach_ec(srv)
            srv.on_texture_request(ec)
            assert len(rc_conn.of_type(wire.TextureRequest)) == 1
            srv.on_texture_image(self._image())
            assert len(conn.of_type(wire.TextureImage)) == 1
        finally:
            srv.stop()

    def test_request_without_rc_errors(self):
        srv = make_server()
        try:
            ec, conn = attach_ec(srv)
            srv.on_texture_request(ec)
            (stat,) = conn.of_type(wire.Stats)
            assert stat.code == 1
        finally:
            srv.stop()

    def test_concurrent_requests_both_served(self):
        srv = make_server()
        try:
            rc_conn = RecordingConn()
            rc_sess = ClientSession(os.urandom(16), wire.Role.RECONSTRUCTION,
                                    rc_conn, None, ready=True)
            srv.sessions[rc_sess.client_id] = rc_sess
            ec1, conn1 = attach_ec(srv)
            ec2, conn2 = attach_ec(srv)
            srv.on_texture_request(ec1)
            srv.on_texture_request(ec2)
            srv.on_texture_image(self._image())
            assert len(conn1.of_type(wire.TextureImage)) == 1
            assert len(conn2.of_type(wire.TextureImage)) == 1
        finally:
            srv.stop()

    def test_non_waiters_not_served_by_default(self):
        srv = make_server()
        try:
            rc_sess = ClientSession(os.urandom(16), wire.Role.RECONSTRUCTION,
                                    RecordingConn(), None, ready=True)
            srv.sessions[rc_sess.client_id] = rc_sess
            ec1, conn1 = attach_ec(srv)
            _, conn2 = attach_ec(srv)
            srv.on_texture_request(ec1)
            srv.on_texture_image(self._image())
            assert len(conn1.of_type(wire.TextureImage)) == 1
            assert len(conn2.of_type(wire.TextureImage)) == 0
        finally:
            srv.stop()


class TestStreamSet:
    def test_insert_dedupes_order_queue(self):
        ss = StreamSet(64, 64)
        assert ss.insert((1, 1, 1)) is True
        assert ss.insert((1, 1, 1)) is False
        assert ss.extract_ordered(10) == [(1, 1, 1)]
        assert ss.extract_ordered(10) == []

    def test_ordered_extraction_skips_stale_entries(self):
        ss = StreamSet(64, 64)
        ss.insert((1, 0, 0))
        ss.insert((2, 0, 0))
        ss.remove((1, 0, 0))
        assert ss.extract_ordered(10) == [(2, 0, 0)]

    def test_reinsert_after_extract_requeues(self):
        ss = StreamSet(64, 64)
        ss.insert((1, 0, 0))
        assert ss.extract_ordered(1) == [(1, 0, 0)]
        assert ss.insert((1, 0, 0)) is True
        assert ss.extract_ordered(1) == [(1, 0, 0)]
