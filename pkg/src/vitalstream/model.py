"""Domain records shared by every stage, plus the canonical JSON codec.

Every record type carries a ``kind`` tag on the wire so a single ``decode``
can rebuild any of them. Timestamps are integer milliseconds since the
scenario epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Any, Union

RRI_MIN_MS = 300
RRI_MAX_MS = 2000
RRI_MAX_JUMP = 0.2
DECIMALS = 6

POSTURE_LABELS = ("Upright", "Bent", "DeepBend", "LyingOrExtreme", "Active")
DANGEROUS_LABELS = frozenset({"DeepBend", "LyingOrExtreme"})
METRICS = ("fatigue", "relaxation")
ALERT_KINDS = ("DangerousPosture",)


class CodecError(ValueError):
    """Bytes that do not decode to a known record."""


def quantize(x: float) -> float:
    """Round to the wire precision; normalises -0.0."""
    q = round(float(x), DECIMALS)
    return q + 0.0


def is_artifact(rri_ms: float, previous_rri_ms: float | None) -> bool:
    """The RRI artifact predicate: out of range, or a >20 % jump."""
    if rri_ms < RRI_MIN_MS or rri_ms > RRI_MAX_MS:
        return True
    if previous_rri_ms is not None and abs(rri_ms - previous_rri_ms) > RRI_MAX_JUMP * previous_rri_ms:
        return True
    return False


@dataclass(frozen=True, slots=True)
class EcgSample:
    worker: str
    ts: int
    seq: int
    value: float

    kind = "ecg"


@dataclass(frozen=True, slots=True)
class AccelSample:
    worker: str
    ts: int
    seq: int
    ax: float
    ay: float
    az: float

    kind = "accel"


@dataclass(frozen=True, slots=True)
class RriInterval:
    worker: str
    ts: int
    rri_ms: int
    artifact: bool
    seq: int

    kind = "rri"


@dataclass(frozen=True, slots=True)
class PostureObservation:
    worker: str
    ts: int
    tilt_deg: float
    activity_g: float
    label: str
    seq: int

    kind = "posture"


@dataclass(frozen=True, slots=True)
class Alert:
    worker: str
    onset_ts: int
    raised_ts: int
    dwell_ms: int
    kind_: str = "DangerousPosture"

    kind = "alert"


@dataclass(frozen=True, slots=True)
class AnalysisResult:
    worker: str
    metric: str
    window_start: int
    window_end: int
    input_count: int
    insufficient: bool
    value: float | None = None
    cvi: float | None = None

    kind = "result"

    @property
    def window_index(self) -> int:
        return self.window_start // (self.window_end - self.window_start)


@dataclass(frozen=True, slots=True)
class WindowConfig:
    metric: str
    window_ms: int = 60_000
    min_rri_per_window: int = 30

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.window_ms <= 0:
            raise ValueError("window_ms must be positive")
        if self.min_rri_per_window < 2:
            raise ValueError("min_rri_per_window must be at least 2")


PrimaryRecord = Union[RriInterval, PostureObservation]
Record = Union[EcgSample, AccelSample, RriInterval, PostureObservation, Alert, AnalysisResult]

_TYPES = {cls.kind: cls for cls in (EcgSample, AccelSample, RriInterval, PostureObservation, Alert, AnalysisResult)}


def to_dict(record: Record) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": record.kind}
    for f in fields(record):
        v = getattr(record, f.name)
        if v is None:
            continue
        if isinstance(v, float):
            v = quantize(v)
        # Alert's own "kind" field clashes with the record tag
        out["alert_kind" if f.name == "kind_" else f.name] = v
    return out


def from_dict(d: dict[str, Any]) -> Record:
    try:
        cls = _TYPES[d["kind"]]
    except (KeyError, TypeError):
        raise CodecError(f"unknown record kind in {d!r}") from None
    kwargs = {}
    for f in fields(cls):
        key = "alert_kind" if f.name == "kind_" else f.name
        if key in d:
            kwargs[f.name] = d[key]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise CodecError(str(exc)) from None


def dumps(obj: Any) -> bytes:
    """Canonical JSON: sorted keys, no whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode()


def encode(record: Record) -> bytes:
    return dumps(to_dict(record))


def decode(data: bytes | str) -> Record:
    try:
        d = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CodecError(str(exc)) from None
    return from_dict(d)


def _finite(*xs) -> bool:
    return all(isinstance(x, (int, float)) and math.isfinite(x) for x in xs)


def _valid_worker(w) -> bool:
    return isinstance(w, str) and 1 <= len(w) <= 64 and w.isascii() and not any(c.isspace() for c in w)


def validate(record: Record) -> list[str]:
    """Return every violated invariant of ``record``; empty means ok."""
    errs: list[str] = []
    if not _valid_worker(getattr(record, "worker", None)):
        errs.append("worker id must be 1-64 ASCII characters without whitespace")
    if isinstance(record, (EcgSample, AccelSample, RriInterval, PostureObservation)) and record.ts < 0:
        errs.append("ts must be non-negative")

    if isinstance(record, EcgSample):
        if not _finite(record.value):
            errs.append("non-finite value")
    elif isinstance(record, AccelSample):
        if not _finite(record.ax, record.ay, record.az):
            errs.append("non-finite component")
    elif isinstance(record, RriInterval):
        if not record.rri_ms > 0:
            errs.append("rri_ms must be positive")
        if is_artifact(record.rri_ms, None) and not record.artifact:
            errs.append("artifact flag must be set for out-of-range RRI")
    elif isinstance(record, PostureObservation):
        if not _finite(record.tilt_deg, record.activity_g):
            errs.append("non-finite component")
        elif not 0 <= record.tilt_deg <= 180:
            errs.append("tilt_deg must lie in [0, 180]")
        if record.label not in POSTURE_LABELS:
            errs.append(f"unknown posture label {record.label!r}")
    elif isinstance(record, Alert):
        if record.raised_ts < record.onset_ts:
            errs.append("raised_ts must not precede onset_ts")
        if record.dwell_ms < 0:
            errs.append("dwell_ms must be non-negative")
        if record.kind_ not in ALERT_KINDS:
            errs.append(f"unknown alert kind {record.kind_!r}")
    elif isinstance(record, AnalysisResult):
        if record.metric not in METRICS:
            errs.append(f"unknown metric {record.metric!r}")
        if record.window_end <= record.window_start:
            errs.append("window_end must exceed window_start")
        if record.insufficient and (record.value is not None or record.cvi is not None):
            errs.append("insufficient result must not carry a value")
        if not record.insufficient:
            if record.value is None:
                errs.append("sufficient result must carry a value")
            elif not 0 <= record.value <= 100:
                errs.append("score must lie in [0, 100]")
    return errs
