"""In-process publish/subscribe broker with MQTT-like topics.

Topics look like ``daef/<session>/encoder``. Subscription patterns accept
the MQTT wildcards ``+`` (one level) and ``#`` (the remaining levels).
Messages travel as encoded bytes, so every delivery exercises the codec.
Retained messages are replayed to late subscribers. Delivery is
at-least-once: the broker can be told to duplicate deliveries, and
receivers drop repeats with :class:`Deduplicator`.
"""

from __future__ import annotations

import queue
import socket
import socketserver
import struct
import threading
import json

from daef.errors import CorruptPayload, NodeTimeout, PayloadTooLarge, UnknownSession
from daef.federation.packets import KnowledgePacket, decode, encode

DEFAULT_MAX_PAYLOAD = 64 * 2**20


def topic(session_id: str, *parts) -> str:
    return "/".join(["daef", session_id, *(str(p) for p in parts)])


def topic_matches(pattern: str, name: str) -> bool:
    pat, levels = pattern.split("/"), name.split("/")
    for i, p in enumerate(pat):
        if p == "#":
            return True
        if i >= len(levels) or (p != "+" and p != levels[i]):
            return False
    return len(pat) == len(levels)


def _session_of(name: str) -> str:
    levels = name.split("/")
    if len(levels) < 3 or levels[0] != "daef":
        raise ValueError(f"topic {name!r} is not of the form daef/<session>/...")
    return levels[1]


class Subscription:
    def __init__(self, pattern: str):
        self.pattern = pattern
        self._queue: queue.Queue[tuple[str, bytes]] = queue.Queue()

    def _deliver(self, name: str, data: bytes) -> None:
        self._queue.put((name, data))

    def get(self, timeout: float | None = None) -> tuple[str, KnowledgePacket]:
        try:
            name, data = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise NodeTimeout(f"nothing received on {self.pattern!r} within {timeout} s") from None
        return name, decode(data)

    def pending(self) -> int:
        return self._queue.qsize()


class Deduplicator:
    """Accept each (sender, topic) stream only in strictly increasing sequence."""

    def __init__(self):
        self._last: dict[tuple[str, str], int] = {}

    def accept(self, name: str, packet: KnowledgePacket) -> bool:
        key = (packet.node_id, name)
        if packet.sequence <= self._last.get(key, -1):
            return False
        self._last[key] = packet.sequence
        return True


class Broker:
    """Thread-safe broker; publication order is delivery order for every subscriber."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD, duplicate_every: int = 0):
        self.max_payload = max_payload
        self.duplicate_every = duplicate_every
        self._lock = threading.Lock()
        self._sessions: set[str] = set()
        self._subs: list[Subscription] = []
        self._retained: dict[str, bytes] = {}
        self._deliveries = 0

    def open_session(self, session_id: str) -> None:
        with self._lock:
            self._sessions.add(session_id)

    def close_session(self, session_id: str) -> None:
        with self._lock:
            self._sessions.discard(session_id)
            self._retained = {
                k: v for k, v in self._retained.items() if _session_of(k) != session_id
            }
            self._subs = [s for s in self._subs if _pattern_session(s.pattern) != session_id]

    def _check_session(self, name: str) -> None:
        session = _session_of(name)
        if session not in self._sessions:
            raise UnknownSession(f"no open session {session!r}")

    def subscribe(self, pattern: str) -> Subscription:
        sub = Subscription(pattern)
        with self._lock:
            self._check_session(pattern)
            self._subs.append(sub)
            for name in sorted(self._retained):
                if topic_matches(pattern, name):
                    sub._deliver(name, self._retained[name])
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs = [s for s in self._subs if s is not sub]

    def publish(self, name: str, packet: KnowledgePacket | bytes, retain: bool = False) -> None:
        data = packet if isinstance(packet, bytes) else encode(packet)
        if len(data) > self.max_payload:
            raise PayloadTooLarge(f"{len(data)} bytes exceeds the {self.max_payload} byte cap")
        with self._lock:
            self._check_session(name)
            if retain:
                self._retained[name] = data
            for sub in self._subs:
                if topic_matches(sub.pattern, name):
                    sub._deliver(name, data)
                    self._deliveries += 1
                    if self.duplicate_every and self._deliveries % self.duplicate_every == 0:
                        sub._deliver(name, data)


def _pattern_session(pattern: str) -> str | None:
    try:
        return _session_of(pattern)
    except ValueError:
        return None


# -- loopback TCP transport ---------------------------------------------------
#
# Frames are a 4-byte big-endian length followed by that many bytes of UTF-8
# JSON. Client requests: {"op": "open"|"subscribe"|"publish", ...}; the server
# answers every request with {"ok": true} or {"ok": false, "error": ...} and
# pushes {"topic": ..., "packet": ...} frames for matching publications.

_LENGTH = struct.Struct(">I")


def frame(body: bytes) -> bytes:
    return _LENGTH.pack(len(body)) + body


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_size: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    (length,) = _LENGTH.unpack(_read_exact(sock, _LENGTH.size))
    if length > max_size:
        raise PayloadTooLarge(f"frame of {length} bytes exceeds the {max_size} byte cap")
    return _read_exact(sock, length)


def write_frame(sock: socket.socket, body: bytes) -> None:
    sock.sendall(frame(body))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        broker: Broker = self.server.broker
        send_lock = threading.Lock()
        forwarders = []

        def send(doc: dict) -> None:
            with send_lock:
                write_frame(self.request, json.dumps(doc).encode("utf-8"))

        def forward(sub: Subscription) -> None:
            while True:
                name, data = sub._queue.get()
                if data is None:
                    return
                try:
                    send({"topic": name, "packet": json.loads(data)})
                except OSError:
                    return

        try:
            while True:
                try:
                    req = json.loads(read_frame(self.request, broker.max_payload))
                except (ConnectionError, OSError):
                    return
                try:
                    op = req["op"]
                    if op == "open":
                        broker.open_session(req["session"])
                    elif op == "subscribe":
                        sub = broker.subscribe(req["pattern"])
                        t = threading.Thread(target=forward, args=(sub,), daemon=True)
                        forwarders.append((sub, t))
                        t.start()
                    elif op == "publish":
                        data = json.dumps(req["packet"], separators=(",", ":")).encode("utf-8")
                        broker.publish(req["topic"], data, bool(req.get("retain")))
                    else:
                        raise ValueError(f"unknown op {op!r}")
                    send({"ok": True})
                except Exception as exc:
                    send({"ok": False, "error": f"{type(exc).__name__}: {exc}"})
        finally:
            for sub, _ in forwarders:
                broker.unsubscribe(sub)
                sub._queue.put(("", None))


class TcpBrokerServer(socketserver.ThreadingTCPServer):
    """Expose a :class:`Broker` on a loopback port."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.broker = broker
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def __enter__(self) -> "TcpBrokerServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
        self.server_close()


class TcpBrokerClient:
    """Blocking client. Received publications are queued as in :class:`Subscription`."""

    def __init__(self, address: tuple[str, int], timeout: float = 30.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._sock.settimeout(None)
        self._replies: queue.Queue[dict] = queue.Queue()
        self.inbox = Subscription("#")
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self.timeout = timeout

    def _read_loop(self) -> None:
        while True:
            try:
                doc = json.loads(read_frame(self._sock))
            except (ConnectionError, OSError, ValueError):
                self._replies.put({"ok": False, "error": "connection closed"})
                return
            if "topic" in doc:
                body = json.dumps(doc["packet"], separators=(",", ":")).encode("utf-8")
                self.inbox._deliver(doc["topic"], body)
            else:
                self._replies.put(doc)

    def _request(self, doc: dict) -> None:
        write_frame(self._sock, json.dumps(doc, separators=(",", ":")).encode("utf-8"))
        try:
            reply = self._replies.get(timeout=self.timeout)
        except queue.Empty:
            raise NodeTimeout("broker did not answer") from None
        if not reply.get("ok"):
            error = reply.get("error", "")
            if error.startswith("UnknownSession"):
                raise UnknownSession(error)
            if error.startswith("PayloadTooLarge"):
                raise PayloadTooLarge(error)
            raise CorruptPayload(error)

    def open_session(self, session_id: str) -> None:
        self._request({"op": "open", "session": session_id})

    def subscribe(self, pattern: str) -> Subscription:
        self._request({"op": "subscribe", "pattern": pattern})
        return self.inbox

    def publish(self, name: str, packet: KnowledgePacket, retain: bool = False) -> None:
        json.loads(encode(packet))  # validates before sending
        self._request({"op": "publish", "topic": name, "packet": packet.to_dict(), "retain": retain})

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self) -> "TcpBrokerClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
