"""Message transports: length-delimited TCP and binary-frame WebSocket.

Both carry identical frame bytes.  A connection supports one concurrent
reader and one concurrent writer; writes are serialized by a lock so a
connection's messages stay totally ordered.
"""

from __future__ import annotations

import socket
import threading
from typing import Callable, Optional

from websockets.sync.client import connect as ws_connect
from websockets.sync.server import Server as _WsServer
from websockets.sync.server import serve as ws_serve

from . import wire


class TransportClosed(Exception):
    """Peer went away or the connection was closed locally."""


class Connection:
    """Common send/recv surface with byte accounting."""

    def __init__(self) -> None:
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        self.closed = False

    def send(self, msg: wire.Message, codec: int = wire.Codec.IDENTITY) -> None:
        frame = wire.encode_message(msg, codec)
        with self._send_lock:
            self._send_frame(frame)
            self.bytes_sent += len(frame)

    def recv(self) -> wire.Message:
        frame = self._recv_frame()
        self.bytes_received += len(frame)
        return wire.decode_message(frame)

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket) -> None:
        super().__init__()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock

    def _send_frame(self, frame: bytes) -> None:
        if self.closed:
            raise TransportClosed("connection closed")
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_frame(self) -> bytes:
        header = self._recv_exact(wire.HEADER.size)
        _, _, clen, _ = wire.decode_header(header)
        return header + self._recv_exact(clen)

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class WsConnection(Connection):
    """Adapter over a websockets sync connection; one message per frame."""

    def __init__(self, ws) -> None:
        super().__init__()
        self._ws = ws

    def _send_frame(self, frame: bytes) -> None:
        if self.closed:
            raise TransportClosed("connection closed")
        try:
            self._ws.send(frame)
        except Exception as exc:
            raise TransportClosed(str(exc)) from exc

    def _recv_frame(self) -> bytes:
        try:
            frame = self._ws.recv()
        except Exception as exc:
            raise TransportClosed(str(exc)) from exc
        if isinstance(frame, str):
            raise wire.WireError("text frame on a binary protocol")
        return frame

    def close(self) -> None:
        self.closed = True
        try:
            self._ws.close()
        except Exception:
            pass


def connect_tcp(host: str, port: int, timeout: float = 5.0) -> TcpConnection:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpConnection(sock)


def connect_ws(url: str) -> WsConnection:
    return WsConnection(ws_connect(url, max_size=None))


class TcpListener:
    """Accept loop on a thread; hands each connection to the handler."""

    def __init__(
        self, host: str, port: int, handler: Callable[[Connection], None]
    ) -> None:
        self._sock = socket.create_server((host, port))
        self.port = self._sock.getsockname()[1]
        self._handler = handler
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"tcp-listen:{self.port}")
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _addr = self._sock.accept()
            except OSError:
                return
            conn = TcpConnection(sock)
            threading.Thread(
                target=self._handler, args=(conn,), daemon=True, name="tcp-conn"
            ).start()

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


class WsListener:
    """WebSocket endpoint at /ws, same handler contract as TcpListener."""

    def __init__(
        self, host: str, port: int, handler: Callable[[Connection], None]
    ) -> None:
        def on_ws(ws) -> None:
            if ws.request is not None and ws.request.path not in ("/ws", "/ws/"):
                ws.close(code=1008, reason="connect to /ws")
                return
            handler(WsConnection(ws))

        self._server: _WsServer = ws_serve(on_ws, host, port, max_size=None)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True,
            name=f"ws-listen:{self.port}"
        )
        self._thread.start()

    def close(self) -> None:
        self._server.shutdown()
