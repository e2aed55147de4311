"""Framed TCP transport for the broker.

Frame layout, all integers big-endian:

    u32 length | u8 kind | body          (length covers kind + body)

Kinds: 0x01 CONNECT(client_id), 0x02 PUB(topic | pub_seq u64 | payload),
0x03 SUB(pattern | resume u8 | cursor blob), 0x04 MSG(topic | publisher |
pub_seq u64 | payload), 0x05 ACK(cursor delta), 0x06 PING, 0x07 PONG,
0x08 PUBACK(pub_seq u64 | broker_seq u64). Strings are u16-length-prefixed
UTF-8; a cursor blob is u32 count then (publisher | topic | seq u64) entries.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from queue import Empty, Queue
from typing import Optional

from .pubsub import Broker, Disconnected, Envelope

__all__ = ["WireServer", "WireClient", "FrameError"]

log = logging.getLogger(__name__)

K_CONNECT = 0x01
K_PUB = 0x02
K_SUB = 0x03
K_MSG = 0x04
K_ACK = 0x05
K_PING = 0x06
K_PONG = 0x07
K_PUBACK = 0x08

MAX_FRAME = 1 + 2 + 65535 + 8 + 256 * 1024 + 64  # kind + headers + payload cap


class FrameError(Exception):
    pass


# -- primitive codecs ----------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FrameError("string too long")
    return struct.pack(">H", len(b)) + b


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if off + 2 > len(buf):
        raise FrameError("truncated string length")
    (n,) = struct.unpack_from(">H", buf, off)
    off += 2
    if off + n > len(buf):
        raise FrameError("truncated string body")
    return buf[off:off + n].decode("utf-8"), off + n


def pack_cursor(cursor: dict) -> bytes:
    out = [struct.pack(">I", len(cursor))]
    for (publisher, topic), seq in sorted(cursor.items()):
        out.append(_pack_str(publisher))
        out.append(_pack_str(topic))
        out.append(struct.pack(">Q", seq))
    return b"".join(out)


def unpack_cursor(buf: bytes, off: int = 0) -> dict:
    if off + 4 > len(buf):
        raise FrameError("truncated cursor count")
    (n,) = struct.unpack_from(">I", buf, off)
    off += 4
    cur = {}
    for _ in range(n):
        publisher, off = _unpack_str(buf, off)
        topic, off = _unpack_str(buf, off)
        if off + 8 > len(buf):
            raise FrameError("truncated cursor seq")
        (seq,) = struct.unpack_from(">Q", buf, off)
        off += 8
        cur[(publisher, topic)] = seq
    return cur


def write_frame(sock: socket.socket, kind: int, body: bytes, lock: Optional[threading.Lock] = None) -> None:
    frame = struct.pack(">IB", 1 + len(body), kind) + body
    if lock:
        with lock:
            sock.sendall(frame)
    else:
        sock.sendall(frame)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    head = _read_exact(sock, 4)
    (length,) = struct.unpack(">I", head)
    if length < 1 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    rest = _read_exact(sock, length)
    return rest[0], rest[1:]


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


# -- server ---------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:  # one thread per connection
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        wlock = threading.Lock()
        broker: Broker = self.server.broker  # type: ignore[attr-defined]
        client_id = ""
        stream = None
        pump: Optional[threading.Thread] = None
        stop = threading.Event()
        try:
            kind, body = read_frame(sock)
            if kind != K_CONNECT:
                raise FrameError("expected CONNECT")
            client_id, _ = _unpack_str(body, 0)
            while True:
                kind, body = read_frame(sock)
                if kind == K_PUB:
                    topic, off = _unpack_str(body, 0)
                    (pub_seq,) = struct.unpack_from(">Q", body, off)
                    payload = body[off + 8:]
                    bseq = broker.publish(topic, client_id, pub_seq, payload)
                    write_frame(sock, K_PUBACK, struct.pack(">QQ", pub_seq, bseq), wlock)
                elif kind == K_SUB:
                    pattern, off = _unpack_str(body, 0)
                    resume = body[off]
                    cursor = unpack_cursor(body, off + 1) if resume else None
                    if stream is not None:
                        stop.set()  # before close: pump must not treat this as overflow
                        stream.close()
                        if pump:
                            pump.join()
                        stop = threading.Event()
                    stream = broker.subscribe(
                        pattern, client_id, cursor=cursor, latest=(resume == 0))
                    pump = threading.Thread(
                        target=_pump, args=(sock, wlock, stream, stop), daemon=True)
                    pump.start()
                elif kind == K_ACK:
                    unpack_cursor(body, 0)  # client-side state; nothing to do here
                elif kind == K_PING:
                    write_frame(sock, K_PONG, b"", wlock)
                else:
                    raise FrameError(f"unexpected kind 0x{kind:02x}")
        except (ConnectionError, FrameError, OSError) as exc:
            log.debug("connection %s closed: %s", client_id or self.client_address, exc)
        except ValueError as exc:
            # protocol violation (oversize payload, malformed topic): drop the
            # connection rather than invent a NACK frame
            log.warning("rejecting publish from %s: %s", client_id, exc)
        finally:
            stop.set()
            if stream is not None:
                stream.close()
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


def _pump(sock: socket.socket, wlock: threading.Lock, stream, stop: threading.Event) -> None:
    try:
        while not stop.is_set():
            try:
                env = stream.get(timeout=0.2)
            except Empty:
                continue
            except Disconnected:
                break
            body = (_pack_str(env.topic) + _pack_str(env.publisher)
                    + struct.pack(">Q", env.pub_seq) + env.payload)
            write_frame(sock, K_MSG, body, wlock)
    except OSError:
        pass
    finally:
        if not stop.is_set():
            # broker dropped the stream (overflow): closing the socket tells
            # the client to reconnect and resume from its cursor
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class WireServer:
    """Threaded TCP front-end over a Broker. Bind with port=0 for ephemeral."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0) -> None:
        class _Srv(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._srv = _Srv((host, port), _Handler)
        self._srv.broker = broker  # type: ignore[attr-defined]
        self.broker = broker
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address  # type: ignore[return-value]

    def start(self) -> "WireServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()


# -- client ---------------------------------------------------------------

class WireClient:
    """Blocking client; publish waits for PUBACK, messages land in a queue."""

    def __init__(self, host: str, port: int, client_id: str, timeout: float = 10.0) -> None:
        self.client_id = client_id
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()
        self._pub_lock = threading.Lock()
        self._pubacks: Queue = Queue()
        self._pongs: Queue = Queue()
        self.messages: Queue = Queue()
        self._closed = threading.Event()
        write_frame(self._sock, K_CONNECT, _pack_str(client_id), self._wlock)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                kind, body = read_frame(self._sock)
                if kind == K_MSG:
                    topic, off = _unpack_str(body, 0)
                    publisher, off = _unpack_str(body, off)
                    (pub_seq,) = struct.unpack_from(">Q", body, off)
                    payload = body[off + 8:]
                    self.messages.put(Envelope(topic, publisher, pub_seq, payload))
                elif kind == K_PUBACK:
                    self._pubacks.put(struct.unpack(">QQ", body))
                elif kind == K_PONG:
                    self._pongs.put(True)
        except (ConnectionError, OSError, FrameError):
            pass
        finally:
            self._closed.set()
            self.messages.put(None)
            self._pubacks.put(None)

    def publish(self, topic: str, pub_seq: int, payload: bytes, timeout: float = 10.0) -> int:
        with self._pub_lock:  # one in-flight publish per connection
            body = _pack_str(topic) + struct.pack(">Q", pub_seq) + payload
            write_frame(self._sock, K_PUB, body, self._wlock)
            ack = self._pubacks.get(timeout=timeout)
            if ack is None:
                raise ConnectionError("server dropped connection (publish rejected?)")
            acked_seq, broker_seq = ack
            if acked_seq != pub_seq:
                raise FrameError(f"PUBACK for {acked_seq}, expected {pub_seq}")
            return broker_seq

    def subscribe(self, pattern: str, cursor: Optional[dict] = None, latest: bool = False) -> None:
        if latest:
            body = _pack_str(pattern) + b"\x00"
        else:
            body = _pack_str(pattern) + b"\x01" + pack_cursor(cursor or {})
        write_frame(self._sock, K_SUB, body, self._wlock)

    def recv(self, timeout: Optional[float] = None) -> Envelope:
        env = self.messages.get(timeout=timeout)
        if env is None:
            raise Disconnected(self.client_id)
        return env

    def ack(self, cursor: dict) -> None:
        write_frame(self._sock, K_ACK, pack_cursor(cursor), self._wlock)

    def ping(self, timeout: float = 5.0) -> bool:
        write_frame(self._sock, K_PING, b"", self._wlock)
        try:
            return bool(self._pongs.get(timeout=timeout))
        except Empty:
            return False

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
