"""Binary message grammar shared by every link in the system.

Frame layout: a 16-byte header (magic "VC", version, type, codec, 3
reserved bytes, compressed length u32, raw length u32, all little-endian)
followed by the payload, compressed per message so each frame is
independently decodable after a reconnect.  The same bytes travel over raw
TCP (length-delimited stream) and WebSocket (one frame per message).

Codecs: 0 stores the payload verbatim, 1 is deflate (zlib), 2 is LZMA as
the bundled high-ratio LZ codec.  Semantics are identical across codecs
and 0 is always available.

Numeric message fields are normalized to f32 precision on construction so
that decode(encode(m)) == m holds bit-exactly.
"""

from __future__ import annotations

import lzma
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .concurrent_hash import BlockKey

MAGIC = b"VC"
VERSION = 1
HEADER = struct.Struct("<2sBBB3sII")
assert HEADER.size == 16

TSDF_BLOCK_WIRE = 12 + 6144  # key + voxel payload
MC_BLOCK_WIRE = 12 + 2048

_KEY = struct.Struct("<3i")
_COUNT = struct.Struct("<I")


class MessageType(IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    TSDF_BATCH = 3
    MC_BATCH = 4
    BLOCK_REQUEST = 5
    POSE_UPDATE = 6
    POSE_BROADCAST = 7
    TEXTURE_REQUEST = 8
    TEXTURE_IMAGE = 9
    RESET_REQUEST = 10
    RESET_BLOCKS = 11
    DELETE_BLOCKS = 12
    STATS = 13


class Codec(IntEnum):
    IDENTITY = 0
    DEFLATE = 1
    LZ_HIGH = 2


class Role(IntEnum):
    RECONSTRUCTION = 1
    EXPLORATION = 2


class Strategy(IntEnum):
    GENERATION_ORDER = 0
    VISIBLE_FIRST = 1
    RANDOM = 2


class WireError(Exception):
    """Any framing violation; fatal for the connection."""


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class LengthMismatch(WireError):
    pass


class CodecUnsupported(WireError):
    pass


class DecompressFailure(WireError):
    pass


def _f32(x: float) -> float:
    return float(np.float32(x))


def _f32s(xs) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(xs, dtype=np.float32))


def compress(payload: bytes, codec: int) -> bytes:
    if codec == Codec.IDENTITY:
        return payload
    if codec == Codec.DEFLATE:
        return zlib.compress(payload, 1)
    if codec == Codec.LZ_HIGH:
        return lzma.compress(payload, preset=0)
    raise CodecUnsupported(f"codec {codec}")


def decompress(payload: bytes, codec: int, raw_len: int) -> bytes:
    if codec == Codec.IDENTITY:
        return payload
    try:
        if codec == Codec.DEFLATE:
            out = zlib.decompress(payload)
        elif codec == Codec.LZ_HIGH:
            out = lzma.decompress(payload)
        else:
            raise CodecUnsupported(f"codec {codec}")
    except (zlib.error, lzma.LZMAError) as exc:
        raise DecompressFailure(str(exc)) from exc
    if len(out) != raw_len:
        raise LengthMismatch(f"decompressed {len(out)} != declared {raw_len}")
    return out


# --------------------------------------------------------------------------
# message dataclasses
# --------------------------------------------------------------------------


@dataclass
class Hello:
    role: int
    client_id: bytes  # 16 random bytes, reused on reconnect
    voxel_size: float
    block_edge: int = 8

    def __post_init__(self) -> None:
        if len(self.client_id) != 16:
            raise ValueError("client_id must be 16 bytes")
        self.voxel_size = _f32(self.voxel_size)


@dataclass
class HelloAck:
    status: int  # 0 ok, 1 config mismatch
    voxel_size: float
    block_edge: int
    pending_count: int  # size of the client's stream set after negotiation

    def __post_init__(self) -> None:
        self.voxel_size = _f32(self.voxel_size)


@dataclass
class TsdfBatch:
    blocks: list[tuple[BlockKey, bytes]]  # (key, 6144-byte voxel payload)


@dataclass
class McBatch:
    blocks: list[tuple[BlockKey, bytes]]  # (key, 2048-byte voxel payload)


@dataclass
class BlockRequest:
    max_blocks: int
    strategy: int
    pose: tuple[float, ...] = (1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0)
    intrinsics: tuple[float, ...] = (1, 1, 0, 0, 0.05, 20.0)  # fx fy cx cy near far

    def __post_init__(self) -> None:
        if self.max_blocks < 1:
            raise ValueError("max_blocks must be >= 1")
        self.pose = _f32s(self.pose)
        self.intrinsics = _f32s(self.intrinsics)


@dataclass
class PoseUpdate:
    pose: tuple[float, ...]

    def __post_init__(self) -> None:
        self.pose = _f32s(self.pose)


@dataclass
class PoseBroadcast:
    entries: list[tuple[bytes, int, tuple[float, ...]]]  # (client_id, role, pose)

    def __post_init__(self) -> None:
        self.entries = [(cid, role, _f32s(pose)) for cid, role, pose in self.entries]


@dataclass
class TextureRequest:
    pass


@dataclass
class TextureImage:
    pose: tuple[float, ...]
    intrinsics: tuple[float, ...]  # fx fy cx cy
    width: int
    height: int
    pixels: bytes  # width*height*3 RGB

    def __post_init__(self) -> None:
        self.pose = _f32s(self.pose)
        self.intrinsics = _f32s(self.intrinsics)
        if len(self.pixels) != self.width * self.height * 3:
            raise ValueError("pixel buffer does not match dimensions")


@dataclass
class ResetRequest:
    pass


@dataclass
class ResetBlocks:
    keys: list[BlockKey]


@dataclass
class DeleteBlocks:
    keys: list[BlockKey]


@dataclass
class Stats:
    code: int  # 0 info, 1 no reconstruction client, 2 no frame yet, 3 error
    model_blocks: int = 0
    pending: int = 0
    time_us: int = 0
    note: str = ""


Message = (
    Hello
    | HelloAck
    | TsdfBatch
    | McBatch
    | BlockRequest
    | PoseUpdate
    | PoseBroadcast
    | TextureRequest
    | TextureImage
    | ResetRequest
    | ResetBlocks
    | DeleteBlocks
    | Stats
)

_TYPE_OF = {
    Hello: MessageType.HELLO,
    HelloAck: MessageType.HELLO_ACK,
    TsdfBatch: MessageType.TSDF_BATCH,
    McBatch: MessageType.MC_BATCH,
    BlockRequest: MessageType.BLOCK_REQUEST,
    PoseUpdate: MessageType.POSE_UPDATE,
    PoseBroadcast: MessageType.POSE_BROADCAST,
    TextureRequest: MessageType.TEXTURE_REQUEST,
    TextureImage: MessageType.TEXTURE_IMAGE,
    ResetRequest: MessageType.RESET_REQUEST,
    ResetBlocks: MessageType.RESET_BLOCKS,
    DeleteBlocks: MessageType.DELETE_BLOCKS,
    Stats: MessageType.STATS,
}


def _pack_keys(keys: list[BlockKey]) -> bytes:
    parts = [_COUNT.pack(len(keys))]
    parts.extend(_KEY.pack(*k) for k in keys)
    return b"".join(parts)


def _unpack_keys(payload: bytes) -> list[BlockKey]:
    (count,) = _COUNT.unpack_from(payload, 0)
    if len(payload) != 4 + 12 * count:
        raise LengthMismatch("key list length mismatch")
    return [_KEY.unpack_from(payload, 4 + 12 * i) for i in range(count)]


def _pack_batch(blocks: list[tuple[BlockKey, bytes]], block_bytes: int) -> bytes:
    parts = [_COUNT.pack(len(blocks))]
    for key, raw in blocks:
        if len(raw) != block_bytes:
            raise ValueError(f"block payload must be {block_bytes} bytes")
        parts.append(_KEY.pack(*key))
        parts.append(raw)
    return b"".join(parts)


def _unpack_batch(payload: bytes, block_bytes: int) -> list[tuple[BlockKey, bytes]]:
    (count,) = _COUNT.unpack_from(payload, 0)
    stride = 12 + block_bytes
    if len(payload) != 4 + stride * count:
        raise LengthMismatch("batch length mismatch")
    out = []
    off = 4
    for _ in range(count):
        key = _KEY.unpack_from(payload, off)
        out.append((key, payload[off + 12 : off + stride]))
        off += stride
    return out


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return struct.pack("<B16sfB", msg.role, msg.client_id, msg.voxel_size,
                           msg.block_edge)
    if isinstance(msg, HelloAck):
        return struct.pack("<BfBI", msg.status, msg.voxel_size, msg.block_edge,
                           msg.pending_count)
    if isinstance(msg, TsdfBatch):
        return _pack_batch(msg.blocks, 6144)
    if isinstance(msg, McBatch):
        return _pack_batch(msg.blocks, 2048)
    if isinstance(msg, BlockRequest):
        return struct.pack("<IB12f6f", msg.max_blocks, msg.strategy,
                           *msg.pose, *msg.intrinsics)
    if isinstance(msg, PoseUpdate):
        return struct.pack("<12f", *msg.pose)
    if isinstance(msg, PoseBroadcast):
        parts = [_COUNT.pack(len(msg.entries))]
        for cid, role, pose in msg.entries:
            parts.append(struct.pack("<16sB12f", cid, role, *pose))
        return b"".join(parts)
    if isinstance(msg, TextureRequest):
        return b""
    if isinstance(msg, TextureImage):
        return (
            struct.pack("<12f4f2I", *msg.pose, *msg.intrinsics, msg.width, msg.height)
            + msg.pixels
        )
    if isinstance(msg, ResetRequest):
        return b""
    if isinstance(msg, (ResetBlocks, DeleteBlocks)):
        return _pack_keys(msg.keys)
    if isinstance(msg, Stats):
        note = msg.note.encode("utf-8")
        return struct.pack("<BIIQH", msg.code, msg.model_blocks, msg.pending,
                           msg.time_us, len(note)) + note
    raise TypeError(f"unknown message {type(msg)!r}")


def decode_payload(mtype: int, payload: bytes) -> Message:
    try:
        mt = MessageType(mtype)
    except ValueError as exc:
        raise WireError(f"unknown message type {mtype}") from exc
    if mt == MessageType.HELLO:
        role, cid, voxel, edge = struct.unpack("<B16sfB", payload)
        return Hello(role, cid, voxel, edge)
    if mt == MessageType.HELLO_ACK:
        status, voxel, edge, pending = struct.unpack("<BfBI", payload)
        return HelloAck(status, voxel, edge, pending)
    if mt == MessageType.TSDF_BATCH:
        return TsdfBatch(_unpack_batch(payload, 6144))
    if mt == MessageType.MC_BATCH:
        return McBatch(_unpack_batch(payload, 2048))
    if mt == MessageType.BLOCK_REQUEST:
        vals = struct.unpack("<IB12f6f", payload)
        return BlockRequest(vals[0], vals[1], vals[2:14], vals[14:20])
    if mt == MessageType.POSE_UPDATE:
        return PoseUpdate(struct.unpack("<12f", payload))
    if mt == MessageType.POSE_BROADCAST:
        (count,) = _COUNT.unpack_from(payload, 0)
        entry = struct.Struct("<16sB12f")
        if len(payload) != 4 + entry.size * count:
            raise LengthMismatch("pose broadcast length mismatch")
        entries = []
        for i in range(count):
            vals = entry.unpack_from(payload, 4 + entry.size * i)
            entries.append((vals[0], vals[1], vals[2:14]))
        return PoseBroadcast(entries)
    if mt == MessageType.TEXTURE_REQUEST:
        return TextureRequest()
    if mt == MessageType.TEXTURE_IMAGE:
        head = struct.Struct("<12f4f2I")
        vals = head.unpack_from(payload, 0)
        width, height = vals[16], vals[17]
        pixels = payload[head.size :]
        return TextureImage(vals[0:12], vals[12:16], width, height, pixels)
    if mt == MessageType.RESET_REQUEST:
        return ResetRequest()
    if mt == MessageType.RESET_BLOCKS:
        return ResetBlocks(_unpack_keys(payload))
    if mt == MessageType.DELETE_BLOCKS:
        return DeleteBlocks(_unpack_keys(payload))
    if mt == MessageType.STATS:
        head = struct.Struct("<BIIQH")
        code, blocks, pending, time_us, note_len = head.unpack_from(payload, 0)
        note = payload[head.size : head.size + note_len].decode("utf-8")
        return Stats(code, blocks, pending, time_us, note)
    raise WireError(f"unhandled message type {mt}")  # pragma: no cover


def encode_message(msg: Message, codec: int = Codec.IDENTITY) -> bytes:
    raw = encode_payload(msg)
    body = compress(raw, codec)
    if codec != Codec.IDENTITY and len(body) >= len(raw):
        body, codec = raw, Codec.IDENTITY  # compression did not help
    header = HEADER.pack(
        MAGIC, VERSION, int(_TYPE_OF[type(msg)]), int(codec), b"\x00\x00\x00",
        len(body), len(raw),
    )
    return header + body


def decode_header(header: bytes) -> tuple[int, int, int, int]:
    """Validated (type, codec, compressed_len, raw_len) from 16 header bytes."""
    magic, version, mtype, codec, _reserved, clen, rlen = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    if codec == Codec.IDENTITY and clen != rlen:
        raise LengthMismatch("identity codec with differing lengths")
    return mtype, codec, clen, rlen


def decode_message(frame: bytes) -> Message:
    """Decode one complete frame (header + compressed payload)."""
    if len(frame) < HEADER.size:
        raise LengthMismatch("frame shorter than header")
    mtype, codec, clen, rlen = decode_header(frame[: HEADER.size])
    body = frame[HEADER.size :]
    if len(body) != clen:
        raise LengthMismatch(f"payload {len(body)} != declared {clen}")
    return decode_payload(mtype, decompress(body, codec, rlen))


class MessageReader:
    """Incremental stream decoder; tolerates arbitrary chunk boundaries."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER.size:
                return out
            mtype, codec, clen, rlen = decode_header(bytes(self._buf[: HEADER.size]))
            total = HEADER.size + clen
            if len(self._buf) < total:
                return out
            body = bytes(self._buf[HEADER.size : total])
            del self._buf[:total]
            out.append(decode_payload(mtype, decompress(body, codec, rlen)))
