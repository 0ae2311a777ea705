"""In-process publish/subscribe bus: keyed partitions, offset logs, consumer groups.

Delivery is at-least-once. ``poll`` always starts from the group's committed
offset, so anything not committed is handed out again on the next poll.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

from .model import dumps

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

PRIMARY_TOPIC = "vital.primary"
CLEANSED_TOPIC = "vital.cleansed"


class BusError(Exception):
    pass


class UnknownTopicError(BusError):
    pass


class TopicExistsError(BusError):
    pass


class CommitError(BusError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def partition_for(key: str, partitions: int) -> int:
    return fnv1a_64(key.encode()) % partitions


@dataclass(frozen=True)
class Envelope:
    topic: str
    partition: int
    offset: int
    key: str
    payload: bytes
    publish_ts: int = 0

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "partition": self.partition,
            "offset": self.offset,
            "key": self.key,
            "payload": self.payload.decode(),
            "publish_ts": self.publish_ts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Envelope":
        return cls(d["topic"], d["partition"], d["offset"], d["key"], d["payload"].encode(), d.get("publish_ts", 0))

    def encode(self) -> bytes:
        return dumps(self.to_dict())


class Topic:
    def __init__(self, name: str, partitions: int):
        if partitions < 1:
            raise ValueError("a topic needs at least one partition")
        self.name = name
        self.partitions = partitions
        self.logs: list[list[Envelope]] = [[] for _ in range(partitions)]

    def end_offset(self, partition: int) -> int:
        return len(self.logs[partition])


class Bus:
    def __init__(self, clock: Callable[[], int] = lambda: 0):
        self.clock = clock
        self.topics: dict[str, Topic] = {}
        # (group, topic) -> committed offset per partition
        self._groups: dict[tuple[str, str], list[int]] = {}
        self._lock = threading.RLock()

    def create_topic(self, name: str, partitions: int = 1) -> Topic:
        with self._lock:
            if name in self.topics:
                raise TopicExistsError(f"topic {name!r} already exists")
            t = self.topics[name] = Topic(name, partitions)
            return t

    def topic(self, name: str) -> Topic:
        try:
            return self.topics[name]
        except KeyError:
            raise UnknownTopicError(f"unknown topic {name!r}") from None

    def publish(self, topic: str, key: str, payload: bytes) -> tuple[int, int]:
        with self._lock:
            t = self.topic(topic)
            p = partition_for(key, t.partitions)
            log = t.logs[p]
            log.append(Envelope(topic, p, len(log), key, bytes(payload), int(self.clock())))
            return p, len(log) - 1

    def subscribe(self, topic: str, group: str, partitions: list[int] | None = None) -> "Consumer":
        with self._lock:
            t = self.topic(topic)
            self._groups.setdefault((group, topic), [0] * t.partitions)
            return Consumer(self, topic, group, partitions)

    def committed(self, topic: str, group: str, partition: int) -> int:
        with self._lock:
            return self._groups.get((group, topic), [0] * self.topic(topic).partitions)[partition]

    def fetch(self, topic: str, group: str, partitions: list[int] | None, max_messages: int) -> list[Envelope]:
        with self._lock:
            t = self.topic(topic)
            offsets = self._groups.setdefault((group, topic), [0] * t.partitions)
            parts = range(t.partitions) if partitions is None else partitions
            out: list[Envelope] = []
            for p in parts:
                room = max_messages - len(out)
                if room <= 0:
                    break
                out.extend(t.logs[p][offsets[p]:offsets[p] + room])
            return out

    def commit(self, topic: str, group: str, partition: int, offset: int) -> None:
        """Record ``offset`` as the next offset the group will read."""
        with self._lock:
            t = self.topic(topic)
            if not 0 <= partition < t.partitions:
                raise CommitError(f"no partition {partition} in {topic!r}")
            if offset > t.end_offset(partition) or offset < 0:
                raise CommitError(f"offset {offset} outside log of {topic}[{partition}] (end {t.end_offset(partition)})")
            offsets = self._groups.setdefault((group, topic), [0] * t.partitions)
            offsets[partition] = max(offsets[partition], offset)

    def lag(self, topic: str, group: str) -> int:
        with self._lock:
            t = self.topic(topic)
            offsets = self._groups.get((group, topic), [0] * t.partitions)
            return sum(t.end_offset(p) - offsets[p] for p in range(t.partitions))


class Consumer:
    def __init__(self, bus, topic: str, group: str, partitions: list[int] | None = None):
        self.bus = bus
        self.topic = topic
        self.group = group
        self.partitions = partitions

    def poll(self, max_messages: int = 500) -> list[Envelope]:
        return self.bus.fetch(self.topic, self.group, self.partitions, max_messages)

    def commit(self, partition: int, offset: int) -> None:
        self.bus.commit(self.topic, self.group, partition, offset)

    def commit_batch(self, envelopes: list[Envelope]) -> None:
        """Commit past the highest offset seen per partition."""
        last: dict[int, int] = {}
        for e in envelopes:
            last[e.partition] = max(last.get(e.partition, -1), e.offset)
        for p, off in sorted(last.items()):
            self.commit(p, off + 1)
