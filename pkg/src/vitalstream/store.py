"""Idempotent time-series store backed by an append-only JSON-lines log.

Log line format (one per acknowledged put)::

    <canonical JSON StoreRecord>\\t<crc32 of the JSON, 8 lowercase hex>\\n

A trailing partial line is a torn write and is discarded on recovery; any
complete line that fails its checksum aborts recovery.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .model import Alert, AnalysisResult, CodecError, PostureObservation, RriInterval, decode, dumps, encode

log = logging.getLogger(__name__)

INSERTED = "inserted"
DUPLICATE = "duplicate"


class StoreError(Exception):
    pass


class KeyConflictError(StoreError):
    """Same row key written again with a different payload."""


class KeyMismatchError(StoreError):
    """Payload does not belong under the given row key."""


class RecoveryError(StoreError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt log entry at byte {offset}: {reason}")
        self.offset = offset


@dataclass(frozen=True, order=True)
class RowKey:
    worker: str
    metric: str
    ts: int
    disambiguator: int = 0

    def as_tuple(self) -> tuple[str, str, int, int]:
        return (self.worker, self.metric, self.ts, self.disambiguator)


@dataclass(frozen=True)
class StoreRecord:
    key: RowKey
    payload: bytes
    write_ts: int = 0

    def to_line(self) -> bytes:
        body = dumps({
            "key": {"worker": self.key.worker, "metric": self.key.metric, "ts": self.key.ts,
                    "disambiguator": self.key.disambiguator},
            "payload": self.payload.decode(),
            "write_ts": self.write_ts,
        })
        return body + b"\t" + format(zlib.crc32(body), "08x").encode() + b"\n"

    @classmethod
    def from_body(cls, body: bytes) -> "StoreRecord":
        d = json.loads(body)
        k = d["key"]
        return cls(RowKey(k["worker"], k["metric"], k["ts"], k["disambiguator"]), d["payload"].encode(), d["write_ts"])


def row_key_for(record) -> RowKey:
    """The natural row key of a domain record."""
    if isinstance(record, RriInterval):
        return RowKey(record.worker, "primary.rri", record.ts, record.seq)
    if isinstance(record, PostureObservation):
        return RowKey(record.worker, "primary.posture", record.ts, record.seq)
    if isinstance(record, Alert):
        return RowKey(record.worker, "alert", record.onset_ts, 0)
    if isinstance(record, AnalysisResult):
        return RowKey(record.worker, record.metric, record.window_start, record.window_index)
    raise TypeError(f"no row key for {type(record).__name__}")


def store_record(record, write_ts: int = 0) -> StoreRecord:
    return StoreRecord(row_key_for(record), encode(record), write_ts)


class Store:
    """Ordered in-memory map plus an optional durability log.

    ``put`` appends to the log before acknowledging; ``fsync=True`` also
    forces it to disk.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, clock: Callable[[], int] = lambda: 0, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.fsync = fsync
        self._rows: dict[tuple, StoreRecord] = {}
        self._keys: list[tuple] = []
        self._lock = threading.RLock()
        self._fh = None
        self.duplicates = 0
        if self.path is not None:
            if self.path.exists():
                self._replay(self.path)
            self._fh = open(self.path, "ab")

    # --------------------------------------------------------------

    def put(self, record: StoreRecord) -> str:
        k = record.key.as_tuple()
        with self._lock:
            prior = self._rows.get(k)
            if prior is not None:
                if prior.payload != record.payload:
                    raise KeyConflictError(f"key {k} already holds a different payload")
                self.duplicates += 1
                return DUPLICATE
            self._check_payload(record)
            if self._fh is not None:
                self._fh.write(record.to_line())
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            self._insert(record)
            return INSERTED

    def put_record(self, record) -> str:
        """Store a domain record under its natural key, stamped with the clock."""
        return self.put(store_record(record, int(self.clock())))

    def scan(self, worker: str, metric: str, t0: int, t1: int) -> list[StoreRecord]:
        if t0 > t1:
            raise ValueError("scan needs t0 <= t1")
        with self._lock:
            lo = bisect.bisect_left(self._keys, (worker, metric, t0))
            hi = bisect.bisect_left(self._keys, (worker, metric, t1))
            return [self._rows[k] for k in self._keys[lo:hi]]

    def scan_records(self, worker: str, metric: str, t0: int, t1: int) -> list:
        return [decode(r.payload) for r in self.scan(worker, metric, t0, t1)]

    def get(self, key: RowKey) -> StoreRecord | None:
        with self._lock:
            return self._rows.get(key.as_tuple())

    def keys(self) -> list[RowKey]:
        with self._lock:
            return [RowKey(*k) for k in self._keys]

    def count(self, metric: str | None = None, worker: str | None = None) -> int:
        with self._lock:
            return sum(1 for k in self._keys if (metric is None or k[1] == metric) and (worker is None or k[0] == worker))

    def __len__(self):
        return len(self._keys)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --------------------------------------------------------------

    def _check_payload(self, record: StoreRecord) -> None:
        try:
            rec = decode(record.payload)
        except CodecError as exc:
            raise KeyMismatchError(f"payload does not decode: {exc}") from None
        if getattr(rec, "worker", None) != record.key.worker:
            raise KeyMismatchError(f"payload worker {getattr(rec, 'worker', None)!r} != key worker {record.key.worker!r}")

    def _insert(self, record: StoreRecord) -> None:
        k = record.key.as_tuple()
        self._rows[k] = record
        bisect.insort(self._keys, k)

    def _replay(self, path: Path) -> None:
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                log.warning("discarding %d torn bytes at end of %s", len(data) - pos, path)
                with open(path, "r+b") as fh:
                    fh.truncate(pos)
                break
            line = data[pos:nl]
            body, sep, crc = line.rpartition(b"\t")
            if not sep or format(zlib.crc32(body), "08x").encode() != crc:
                raise RecoveryError(pos, "checksum mismatch")
            try:
                rec = StoreRecord.from_body(body)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecoveryError(pos, f"unreadable entry ({exc})") from None
            if rec.key.as_tuple() not in self._rows:
                self._insert(rec)
            pos = nl + 1


def recover(path: str | os.PathLike, **kwargs) -> Store:
    """Rebuild a store from its log, dropping a torn final entry."""
    return Store(path, **kwargs)
