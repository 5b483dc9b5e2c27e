"""The checked-in protocol fixture corpus decodes to its manifest."""

import hashlib
import json
import pathlib

import pytest

from voxelstream import wire

ROOT = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "protocol"


@pytest.fixture(scope="module")
def manifest():
    return json.loads((ROOT / "manifest.json").read_text())


def test_every_frame_decodes_to_expectation(manifest):
    for entry in manifest["frames"]:
        frame = (ROOT / entry["file"]).read_bytes()
        msg = wire.decode_message(frame)
        assert wire._TYPE_OF[type(msg)] == entry["type"], entry["file"]
        if isinstance(msg, wire.McBatch):
            keys = [list(k) for k, _ in msg.blocks]
            digests = [hashlib.sha256(raw).hexdigest() for _, raw in msg.blocks]
            assert keys == entry["keys"]
            assert digests == entry["payload_sha256"]
        elif isinstance(msg, wire.HelloAck):
            assert msg.status == entry["status"]
            assert msg.pending_count == entry["pending"]
        elif isinstance(msg, wire.DeleteBlocks):
            assert [list(k) for k in msg.keys] == entry["keys"]
        elif isinstance(msg, wire.TextureImage):
            assert (msg.width, msg.height) == (entry["width"], entry["height"])
            assert hashlib.sha256(msg.pixels).hexdigest() == entry["pixels_sha256"]


def test_case_table_matches_package_tables(manifest):
    from voxelstream.mc_tables import CASE_VERTEX_OFFSETS
    import numpy as np

    assert len(manifest["cases"]) == 256
    for i, flat in enumerate(manifest["cases"]):
        ours = np.asarray(CASE_VERTEX_OFFSETS[i], dtype=np.float32).reshape(-1)
        assert ours.tolist() == flat, f"case {i}"


def test_model_stream_digest(manifest):
    frame = (ROOT / manifest["model_file"]).read_bytes()
    msg = wire.decode_message(frame)
    assert len(msg.blocks) == manifest["model_blocks"]
    digest = hashlib.sha256(b"".join(raw for _, raw in msg.blocks)).hexdigest()
    assert digest == manifest["model_sha256"]
