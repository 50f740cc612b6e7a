"""Message transport: in-memory pairs for single-process runs and a socket
wrapper for two-process runs. Both expose the same blocking send/recv of
wire.Message objects, so the protocol code never knows which one it rides.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from queue import Empty, SimpleQueue

from .wire import Message, MsgType, ProtocolError, frame, unframe

_CLOSE = object()
DEFAULT_TIMEOUT = 60.0


class ChannelClosed(ConnectionError):
    """Peer closed the channel (or the transport died)."""


class QueueEndpoint:
    """One end of an in-memory duplex channel."""

    def __init__(self, inbox: SimpleQueue, outbox: SimpleQueue,
                 transcript: list | None = None, label: str = ""):
        self._inbox = inbox
        self._outbox = outbox
        self._transcript = transcript
        self._label = label

    def send(self, msg: Message) -> None:
        if self._transcript is not None:
            self._transcript.append((self._label, msg))
        self._outbox.put(msg)

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        try:
            item = self._inbox.get(timeout=timeout)
        except Empty:
            raise ProtocolError("timed out waiting for peer message") from None
        if item is _CLOSE:
            raise ChannelClosed("peer endpoint closed")
        return item

    def close(self) -> None:
        self._outbox.put(_CLOSE)


class PairChannel:
    """Two connected in-memory endpoints, optionally recording a transcript.

    Transcript entries are (sender label, Message); appends from either
    thread are atomic, so accounting over the transcript is exact even
    though interleaving order is schedule-dependent.
    """

    def __init__(self, transcript: list | None = None):
        q_ab: SimpleQueue = SimpleQueue()
        q_ba: SimpleQueue = SimpleQueue()
        self.transcript = transcript
        self.a = QueueEndpoint(q_ba, q_ab, transcript, "a")
        self.b = QueueEndpoint(q_ab, q_ba, transcript, "b")


class MessageIO:
    """Framed messages over a connected socket, with a reader thread.

    The reader drains the socket continuously into an unbounded inbox, so
    neither side can wedge on a full kernel buffer no matter how lopsided
    the traffic is.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._inbox: SimpleQueue = SimpleQueue()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    def _read_loop(self) -> None:
        while True:
            head = self._read_exact(5)
            if head is None:
                self._inbox.put(_CLOSE)
                return
            _, length = struct.unpack("<BI", head)
            body = self._read_exact(length) if length else b""
            if body is None:
                self._inbox.put(_CLOSE)
                return
            try:
                msg, _ = unframe(head + body)
            except (ProtocolError, ValueError) as exc:
                self._inbox.put(exc)
                return
            self._inbox.put(msg)

    def send(self, msg: Message) -> None:
        data = frame(msg)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(f"send failed: {exc}") from None

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        try:
            item = self._inbox.get(timeout=timeout)
        except Empty:
            raise ProtocolError("timed out waiting for peer message") from None
        if item is _CLOSE:
            raise ChannelClosed("connection closed by peer")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class PeerEndpoint:
    """Typed receive with order-preserving holdback.

    recv_type pulls the next message of a wanted type while parking
    everything else; plain recv replays parked messages first, so the
    overall per-type ordering is never disturbed.
    """

    def __init__(self, endpoint):
        self._ep = endpoint
        self._held: deque = deque()

    def send(self, msg: Message) -> None:
        self._ep.send(msg)

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        if self._held:
            return self._held.popleft()
        return self._ep.recv(timeout)

    def recv_type(self, *types: MsgType, timeout: float = DEFAULT_TIMEOUT) -> Message:
        for i, msg in enumerate(self._held):
            if msg.type in types:
                del self._held[i]
                return msg
        while True:
            msg = self._ep.recv(timeout)
            if msg.type in types:
                return msg
            self._held.append(msg)

    def close(self) -> None:
        self._ep.close()
