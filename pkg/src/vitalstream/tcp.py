"""Framed-TCP binding for the bus.

Each frame is a 4-byte big-endian length followed by canonical JSON. Requests
carry a ``cmd`` of CREATE_TOPIC, PUBLISH, POLL, COMMIT, COMMITTED or LAG;
replies are JSON objects, with an ``error`` field on failure.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading

from .bus import Bus, BusError, CommitError, Consumer, Envelope, TopicExistsError, UnknownTopicError
from .model import dumps

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


def send_frame(sock: socket.socket, obj) -> None:
    body = dumps(obj)
    sock.sendall(HEADER.pack(len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket):
    (n,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds limit")
    return json.loads(_recv_exact(sock, n))


def handle_command(bus: Bus, req: dict) -> dict:
    cmd = req.get("cmd")
    try:
        if cmd == "CREATE_TOPIC":
            bus.create_topic(req["topic"], req.get("partitions", 1))
            return {"ok": True}
        if cmd == "PUBLISH":
            p, off = bus.publish(req["topic"], req["key"], req["payload"].encode())
            return {"partition": p, "offset": off}
        if cmd == "POLL":
            envs = bus.fetch(req["topic"], req["group"], req.get("partitions"), req.get("max", 500))
            return {"envelopes": [e.to_dict() for e in envs]}
        if cmd == "COMMIT":
            bus.commit(req["topic"], req["group"], req["partition"], req["offset"])
            return {"ok": True}
        if cmd == "COMMITTED":
            return {"offset": bus.committed(req["topic"], req["group"], req["partition"])}
        if cmd == "LAG":
            return {"lag": bus.lag(req["topic"], req["group"])}
    except BusError as exc:
        return {"error": type(exc).__name__, "message": str(exc)}
    except (KeyError, TypeError, AttributeError) as exc:
        return {"error": "BadRequest", "message": repr(exc)}
    return {"error": "BadRequest", "message": f"unknown cmd {cmd!r}"}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                req = recv_frame(self.request)
            except (ConnectionError, OSError):
                return
            except json.JSONDecodeError as exc:
                send_frame(self.request, {"error": "BadRequest", "message": str(exc)})
                continue
            send_frame(self.request, handle_command(self.server.bus, req))


class BusServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bus: Bus, host: str = "127.0.0.1", port: int = 0):
        self.bus = bus
        super().__init__((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "BusServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


_ERRORS = {"UnknownTopicError": UnknownTopicError, "TopicExistsError": TopicExistsError, "CommitError": CommitError}


class BusClient:
    """Remote bus with the same surface the pipeline uses on an in-process Bus."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._lock = threading.Lock()

    def _call(self, req: dict) -> dict:
        with self._lock:
            send_frame(self.sock, req)
            resp = recv_frame(self.sock)
        if "error" in resp:
            raise _ERRORS.get(resp["error"], BusError)(resp.get("message", resp["error"]))
        return resp

    def close(self) -> None:
        self.sock.close()

    def create_topic(self, name: str, partitions: int = 1) -> None:
        self._call({"cmd": "CREATE_TOPIC", "topic": name, "partitions": partitions})

    def publish(self, topic: str, key: str, payload: bytes) -> tuple[int, int]:
        r = self._call({"cmd": "PUBLISH", "topic": topic, "key": key, "payload": payload.decode()})
        return r["partition"], r["offset"]

    def fetch(self, topic: str, group: str, partitions, max_messages: int) -> list[Envelope]:
        r = self._call({"cmd": "POLL", "topic": topic, "group": group, "partitions": partitions, "max": max_messages})
        return [Envelope.from_dict(d) for d in r["envelopes"]]

    def commit(self, topic: str, group: str, partition: int, offset: int) -> None:
        self._call({"cmd": "COMMIT", "topic": topic, "group": group, "partition": partition, "offset": offset})

    def committed(self, topic: str, group: str, partition: int) -> int:
        return self._call({"cmd": "COMMITTED", "topic": topic, "group": group, "partition": partition})["offset"]

    def lag(self, topic: str, group: str) -> int:
        return self._call({"cmd": "LAG", "topic": topic, "group": group})["lag"]

    def subscribe(self, topic: str, group: str, partitions=None) -> Consumer:
        return Consumer(self, topic, group, partitions)
