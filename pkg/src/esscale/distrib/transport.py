"""Framed channels over TCP sockets or in-process queues.

Both carry the same encoded frames, so the in-process backend exercises the
exact encode/decode path used on the network.
"""
from __future__ import annotations

import queue
import socket
import threading
from typing import Optional

from esscale.distrib.protocol import ProtocolError, decode, decode_body, encode, read_length


class ChannelClosed(ConnectionError):
    pass


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self.bytes_sent = 0

    def send_frame(self, frame: bytes):
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            self.bytes_sent += len(frame)

    def send(self, msg):
        self.send_frame(encode(msg))

    def _recv_exact(self, n: int) -> Optional[bytes]:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                if buf:
                    raise ProtocolError("connection closed mid-frame")
                return None
            buf.extend(chunk)
        return bytes(buf)

    def recv(self):
        """Next message, or None once the peer has gone away."""
        prefix = self._recv_exact(4)
        if prefix is None:
            return None
        body = self._recv_exact(read_length(prefix))
        if body is None:
            raise ProtocolError("connection closed mid-frame")
        return decode_body(body)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class QueueChannel:
    """One end of an in-process duplex pipe carrying encoded frames."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox = inbox
        self.outbox = outbox
        self.closed = False
        self.bytes_sent = 0

    @classmethod
    def pair(cls) -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send_frame(self, frame: bytes):
        if self.closed:
            raise ChannelClosed("channel closed")
        self.bytes_sent += len(frame)
        self.outbox.put(frame)

    def send(self, msg):
        self.send_frame(encode(msg))

    def recv(self):
        frame = self.inbox.get()
        if frame is None:
            self.closed = True
            return None
        return decode(frame)

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbox.put(None)
            self.inbox.put(None)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(64)
        self.address = self.sock.getsockname()

    def accept(self, timeout: Optional[float] = None) -> Optional[SocketChannel]:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except (socket.timeout, OSError):
            return None
        conn.settimeout(None)
        return SocketChannel(conn)

    def close(self):
        self.sock.close()


def tcp_connect(host: str, port: int, timeout: float = 10.0) -> SocketChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return SocketChannel(sock)


class InprocListener:
    """Hands out queue-channel pairs; ``connect`` is the worker side."""

    def __init__(self):
        self.pending: queue.Queue = queue.Queue()
        self.closed = False

    def connect(self) -> QueueChannel:
        ours, theirs = QueueChannel.pair()
        self.pending.put(ours)
        return theirs

    def accept(self, timeout: Optional[float] = None) -> Optional[QueueChannel]:
        try:
            return self.pending.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        self.closed = True
        self.pending.put(None)
