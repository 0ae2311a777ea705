"""Dispatcher job: persist acquired primaries, republish a cleansed copy.

Per polled batch the order is store, publish, commit. A failure before the
commit leaves the batch to be redelivered; the store's natural-key
idempotency and the analytics buckets' seq dedupe absorb the repeat.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from .bus import CLEANSED_TOPIC, PRIMARY_TOPIC
from .model import Alert, CodecError, PostureObservation, RriInterval, decode, encode, validate
from .store import INSERTED, StoreError

log = logging.getLogger(__name__)


@dataclass
class CleanseReport:
    input_count: int = 0
    deduped: int = 0
    out_of_range_dropped: int = 0
    reordered: int = 0
    output_count: int = 0
    malformed: int = 0

    def check(self) -> bool:
        return self.output_count == self.input_count - self.deduped - self.out_of_range_dropped


def cleanse(batch: list) -> tuple[list, CleanseReport]:
    """Dedupe on (worker, kind, seq), drop artifact RRIs, stable-sort by ts.

    Anything that is not a valid RRI or posture record is counted as
    malformed and left out of ``input_count``.
    """
    rep = CleanseReport()
    seen: set = set()
    kept: list = []
    for rec in batch:
        if not isinstance(rec, (RriInterval, PostureObservation)) or validate(rec):
            rep.malformed += 1
            continue
        rep.input_count += 1
        k = (rec.worker, rec.kind, rec.seq)
        if k in seen:
            rep.deduped += 1
            continue
        seen.add(k)
        if isinstance(rec, RriInterval) and rec.artifact:
            rep.out_of_range_dropped += 1
            continue
        kept.append(rec)
    out = sorted(kept, key=lambda r: r.ts)
    rep.reordered = sum(1 for a, b in zip(kept, out) if a is not b)
    rep.output_count = len(out)
    return out, rep


@dataclass
class DispatchStats:
    batches: int = 0
    polled: int = 0
    stored: int = 0
    store_duplicates: int = 0
    published: int = 0
    failures: int = 0
    reports: list[CleanseReport] = field(default_factory=list)
    # store write time minus envelope publish_ts, per inserted primary
    ingest_latencies: list[int] = field(default_factory=list)


class Dispatcher:
    def __init__(self, bus, store, *, group: str = "dispatcher", partitions: list[int] | None = None,
                 source: str = PRIMARY_TOPIC, sink: str = CLEANSED_TOPIC, max_batch: int = 1000):
        self.bus = bus
        self.store = store
        self.consumer = bus.subscribe(source, group, partitions)
        self.sink = sink
        self.max_batch = max_batch
        self.stats = DispatchStats()
        # per-worker counts of inserted primaries / alerts / duplicates
        self.inserted: dict[str, int] = {}
        self.alerts: dict[str, int] = {}
        self.duplicates: dict[str, int] = {}

    def dispatch_once(self, *, commit: bool = True) -> CleanseReport | None:
        """Process one poll. ``commit=False`` simulates a crash before the commit."""
        batch = self.consumer.poll(self.max_batch)
        if not batch:
            return None
        self.stats.batches += 1
        self.stats.polled += len(batch)
        records = []
        for env in batch:
            try:
                records.append((env, decode(env.payload)))
            except CodecError:
                log.warning("undecodable payload at %s[%d]@%d", env.topic, env.partition, env.offset)
        try:
            for env, rec in records:
                if validate(rec):
                    continue
                status = self.store.put_record(rec)
                w = rec.worker
                if status == INSERTED:
                    if isinstance(rec, Alert):
                        self.alerts[w] = self.alerts.get(w, 0) + 1
                    else:
                        self.inserted[w] = self.inserted.get(w, 0) + 1
                        self.stats.ingest_latencies.append(int(self.store.clock()) - env.publish_ts)
                    self.stats.stored += 1
                else:
                    self.duplicates[w] = self.duplicates.get(w, 0) + 1
                    self.stats.store_duplicates += 1
            cleansed, report = cleanse([rec for _, rec in records if not isinstance(rec, Alert)])
            for rec in cleansed:
                self.bus.publish(self.sink, rec.worker, encode(rec))
                self.stats.published += 1
        except (StoreError, OSError):
            self.stats.failures += 1
            log.exception("store write failed; batch left uncommitted")
            return None
        self.stats.reports.append(report)
        if commit:
            self.consumer.commit_batch(batch)
        return report


def dispatch_loop(bus, store, stop: threading.Event, *, idle_s: float = 0.05, **kwargs) -> Dispatcher:
    """Run a dispatcher until ``stop`` is set."""
    d = Dispatcher(bus, store, **kwargs)
    while not stop.is_set():
        if d.dispatch_once() is None:
            stop.wait(idle_s)
    return d
