"""REST-style ingestion endpoint: ``POST /v1/ingest`` onto the primary topic.

Request body: ``{"request_id": str, "worker": str, "records": [record, ...]}``.
Responses: ``{"accepted": n}``, or ``{"accepted": 0, "duplicate": true}``
when the request id was already seen.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .bus import PRIMARY_TOPIC
from .edge import INGEST_PATH, TransportError
from .model import CodecError, dumps, encode, from_dict, validate

log = logging.getLogger(__name__)


class IngestEndpoint:
    def __init__(self, bus, topic: str = PRIMARY_TOPIC):
        self.bus = bus
        self.topic = topic
        self._seen: set[str] = set()
        self._lock = threading.Lock()
        self.duplicate_requests = 0
        self.duplicate_records = 0
        self.accepted_records = 0
        self.received_records = 0
        self.rejected_records = 0

    def handle(self, path: str, body: bytes) -> tuple[int, bytes]:
        """Returns (HTTP status, response body)."""
        if path != INGEST_PATH:
            return 404, dumps({"error": "not found"})
        try:
            req = json.loads(body)
            request_id, worker, raw = req["request_id"], req["worker"], req["records"]
            if not isinstance(request_id, str) or not isinstance(worker, str) or not isinstance(raw, list):
                raise TypeError("bad field types")
        except (ValueError, KeyError, TypeError) as exc:
            return 400, dumps({"error": f"malformed request: {exc}"})

        with self._lock:
            self.received_records += len(raw)
            if request_id in self._seen:
                self.duplicate_requests += 1
                self.duplicate_records += len(raw)
                return 200, dumps({"accepted": 0, "duplicate": True})
            records = []
            for d in raw:
                try:
                    rec = from_dict(d)
                except CodecError:
                    self.rejected_records += 1
                    continue
                if rec.worker != worker or validate(rec):
                    self.rejected_records += 1
                    continue
                records.append(rec)
            for rec in records:
                self.bus.publish(self.topic, worker, encode(rec))
            self._seen.add(request_id)
            self.accepted_records += len(records)
            return 200, dumps({"accepted": len(records)})

    def transport(self):
        """A ``send(path, body)`` callable delivering straight to this endpoint."""
        def send(path: str, body: bytes) -> bytes:
            status, resp = self.handle(path, body)
            if status != 200:
                raise TransportError(f"HTTP {status}: {resp.decode()}")
            return resp
        return send


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        n = int(self.headers.get("Content-Length", 0))
        status, body = self.server.endpoint.handle(self.path, self.rfile.read(n))
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("ingest %s", fmt % args)


class IngestServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, endpoint: IngestEndpoint, host: str = "127.0.0.1", port: int = 0):
        self.endpoint = endpoint
        super().__init__((host, port), _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "IngestServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def http_transport(base_url: str, timeout: float = 5.0):
    """``send(path, body)`` over HTTP; any failure surfaces as TransportError."""
    def send(path: str, body: bytes) -> bytes:
        req = urllib.request.Request(base_url + path, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc
    return send
