"""End-to-end runs in virtual time: generators -> edge agents -> ingest -> bus ->
dispatcher -> analytics -> store, with scheduled faults and a RunReport.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .analytics import AnalyticsJob
from .bus import CLEANSED_TOPIC, PRIMARY_TOPIC, Bus
from .dispatcher import Dispatcher
from .edge import EdgeAgent, EdgeConfig, IngestRequest, TransportError
from .ingest import IngestEndpoint
from .model import (
    DANGEROUS_LABELS,
    RRI_MAX_MS,
    RRI_MIN_MS,
    AccelSample,
    EcgSample,
    PostureObservation,
    RriInterval,
    WindowConfig,
    dumps,
    encode,
    quantize,
    to_dict,
)
from .signals import (
    TRUTH_LABEL,
    GroundTruth,
    PostureScenario,
    RrProfile,
    Segment,
    build_rr_series,
    rr_deterministic,
    synthesize_accel,
    synthesize_ecg,
)
from .store import Store

log = logging.getLogger(__name__)

FAULT_KINDS = ("UplinkOutage", "BusRedeliver", "DuplicateRequest")
RESULT_METRICS = ("fatigue", "relaxation")
KNOWN_METRICS = RESULT_METRICS + ("primary.rri", "primary.posture", "alert")
CSV_COLUMNS = ["worker", "metric", "window_start_ms", "window_end_ms", "value", "input_count", "insufficient"]


class ConfigError(ValueError):
    pass


class VirtualClock:
    def __init__(self, now: int = 0):
        self.now = now

    def __call__(self) -> int:
        return self.now


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class Fault:
    kind: str
    start_ms: int
    end_ms: int

    def active(self, t: int) -> bool:
        return self.start_ms <= t < self.end_ms


@dataclass(frozen=True)
class WorkerSpec:
    id: str
    rr_profile: RrProfile
    posture: PostureScenario


@dataclass(frozen=True)
class ScenarioConfig:
    workers: tuple[WorkerSpec, ...]
    duration_ms: int = 300_000
    edge: EdgeConfig = EdgeConfig()
    windows: tuple[WindowConfig, ...] = (WindowConfig("fatigue"), WindowConfig("relaxation"))
    tick_interval_ms: int = 10_000
    watermark_ms: int = 5000
    faults: tuple[Fault, ...] = ()
    seed: int = 0
    ecg_fs_hz: float = 250.0
    accel_fs_hz: float = 25.0
    partitions: int = 4
    store_path: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if self.duration_ms < 0:
            raise ConfigError("duration_ms must be non-negative")
        if self.tick_interval_ms <= 0 or self.watermark_ms < 0:
            raise ConfigError("tick_interval_ms must be positive and watermark_ms non-negative")
        ids = [w.id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate worker ids in {ids}")
        if len({w.metric for w in self.windows}) != len(self.windows):
            raise ConfigError("one window config per metric")
        if self.windows and self.tick_interval_ms > min(w.window_ms for w in self.windows):
            raise ConfigError("tick_interval_ms must not exceed the smallest window")
        if self.partitions < 1:
            raise ConfigError("partitions must be at least 1")
        grid = np.arange(0.0, max(self.duration_ms, 1), 100.0)
        for w in self.workers:
            rr = rr_deterministic(w.rr_profile, grid)
            if self.duration_ms > 0 and not np.any((rr >= RRI_MIN_MS) & (rr <= RRI_MAX_MS)):
                raise ConfigError(f"worker {w.id}: RR profile never enters [{RRI_MIN_MS}, {RRI_MAX_MS}] ms")
        for f in self.faults:
            if f.kind not in FAULT_KINDS:
                raise ConfigError(f"unknown fault kind {f.kind!r}")
            if not 0 <= f.start_ms < f.end_ms <= self.duration_ms:
                raise ConfigError(f"fault window [{f.start_ms}, {f.end_ms}) outside the run")
        for kind in FAULT_KINDS:
            spans = sorted((f.start_ms, f.end_ms) for f in self.faults if f.kind == kind)
            for (_, e0), (s1, _) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ConfigError(f"overlapping {kind} faults")


def _build(cls, d: dict, what: str, **extra):
    try:
        return cls(**{**d, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what}: {exc}") from None


def scenario_from_dict(d: dict[str, Any], *, seed: int | None = None) -> ScenarioConfig:
    """Parse the JSON scenario schema (see scenarios/README)."""
    if not isinstance(d, dict):
        raise ConfigError("scenario must be a JSON object")
    d = dict(d)
    file_seed = d.pop("seed", 0)
    seed = int(file_seed if seed is None else seed)
    d.pop("$comment", None)
    duration = int(d.pop("duration_ms", 300_000))
    workers = []
    for i, w in enumerate(d.pop("workers", [{"id": "w1"}])):
        if "id" not in w:
            raise ConfigError(f"worker #{i} has no id")
        rr = dict(w.get("rr_profile", {}))
        rr.setdefault("seed", seed * 1000 + 2 * i)
        profile = _build(RrProfile, rr, "rr_profile")
        p = dict(w.get("posture", {}))
        segs = [_build(Segment, s, "posture segment") for s in p.pop("segments", [])]
        covered = sum(s.duration_ms for s in segs)
        if covered < duration:
            segs.append(Segment(duration - covered, "Upright"))
        p.setdefault("seed", seed * 1000 + 2 * i + 1)
        posture = _build(PostureScenario, p, "posture", segments=tuple(segs))
        workers.append(WorkerSpec(str(w["id"]), profile, posture))
    edge = _build(EdgeConfig, d.pop("edge", {}), "edge config")
    wins = d.pop("windows", {"fatigue": {}, "relaxation": {}})
    windows = tuple(_build(WindowConfig, dict(v), f"window {k}", metric=k) for k, v in wins.items())
    faults = tuple(_build(Fault, f, "fault") for f in d.pop("faults", []))
    try:
        cfg = ScenarioConfig(workers=tuple(workers), duration_ms=duration, edge=edge, windows=windows,
                             faults=faults, seed=seed, **d)
    except TypeError as exc:
        raise ConfigError(f"bad scenario: {exc}") from None
    cfg.validate()
    return cfg


def load_scenario(path, *, seed: int | None = None) -> ScenarioConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    return scenario_from_dict(d, seed=seed)


def default_scenario(**overrides) -> ScenarioConfig:
    cfg = scenario_from_dict({"workers": [{"id": "w1"}]})
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------- streams


@dataclass
class WorkerStreams:
    ecg: list[EcgSample]
    accel: list[AccelSample]
    truth: GroundTruth


def generate_streams(spec: WorkerSpec, cfg: ScenarioConfig) -> WorkerStreams:
    if cfg.duration_ms <= 0:
        return WorkerStreams([], [], GroundTruth())
    rr = build_rr_series(spec.rr_profile, cfg.duration_ms)
    ecg, truth = synthesize_ecg(rr, cfg.ecg_fs_hz, worker=spec.id, seed=spec.rr_profile.seed, duration_ms=cfg.duration_ms)
    accel, ptruth = synthesize_accel(spec.posture, cfg.accel_fs_hz, worker=spec.id)
    accel = [s for s in accel if s.ts < cfg.duration_ms]
    truth.segments = [(a, min(b, cfg.duration_ms), p) for a, b, p in ptruth.segments if a < cfg.duration_ms]
    return WorkerStreams(ecg, accel, truth)


def danger_episodes(truth: GroundTruth) -> list[tuple[int, int]]:
    """Contiguous ground-truth spans of dangerous posture."""
    out: list[list[int]] = []
    for a, b, p in truth.segments:
        if TRUTH_LABEL[p] in DANGEROUS_LABELS:
            if out and out[-1][1] == a:
                out[-1][1] = b
            else:
                out.append([a, b])
    return [(a, b) for a, b in out]


# ---------------------------------------------------------------- report


def percentiles(xs) -> dict[str, float | None]:
    if len(xs) == 0:
        return {"p50": None, "p95": None, "max": None}
    a = np.asarray(xs, dtype=float)
    return {"p50": quantize(np.percentile(a, 50)), "p95": quantize(np.percentile(a, 95)), "max": quantize(a.max())}


@dataclass
class RunReport:
    data: dict
    store: Store | None = field(default=None, repr=False)
    agents: dict[str, EdgeAgent] = field(default_factory=dict, repr=False)
    streams: dict[str, WorkerStreams] = field(default_factory=dict, repr=False)
    analytics: AnalyticsJob | None = field(default=None, repr=False)
    endpoint: IngestEndpoint | None = field(default=None, repr=False)

    def to_bytes(self) -> bytes:
        return dumps(self.data)

    def __getitem__(self, k):
        return self.data[k]


def predict_bandwidth(cfg: ScenarioConfig) -> dict:
    """Byte totals expected from sampling rates and representative record sizes."""
    raw = primary = 0
    d = cfg.duration_ms
    e = cfg.edge
    for w in cfg.workers:
        n_ecg = int(d * cfg.ecg_fs_hz // 1000)
        n_acc = int(d * cfg.accel_fs_hz // 1000)
        # mid-run sample; noise-level values carry 6 decimals, half of them signed
        ecg = (len(encode(EcgSample(w.id, d // 2, n_ecg // 2, 0.012345))) * 2 + 1) / 2
        acc = len(encode(AccelSample(w.id, d // 2, n_acc // 2, 0.012345, 0.987654, -0.012345)))
        raw += n_ecg * ecg + n_acc * acc
        n_rri = max(d / w.rr_profile.mean_rr_ms - 1, 0)
        n_post = d // e.posture_window_ms
        rri = len(encode(RriInterval(w.id, d // 2, int(w.rr_profile.mean_rr_ms), False, int(n_rri // 2)))) + 1
        post = len(encode(PostureObservation(w.id, d // 2, 12.345678, 0.012345, "Upright", n_post // 2))) + 1
        per_tick = (n_rri + n_post) / max(d / e.upload_interval_ms, 1)
        n_req = math.ceil(d / e.upload_interval_ms) * max(1, math.ceil(per_tick / e.upload_batch_max))
        overhead = len(IngestRequest(f"{w.id}-00000000", w.id, []).body())
        primary += n_req * overhead + n_rri * rri + n_post * post
    return {"raw_bytes": raw, "primary_bytes": primary, "ratio": raw / primary if primary else None}


# ---------------------------------------------------------------- run


class _Transport:
    """Edge -> endpoint link with fault injection and per-worker accounting."""

    def __init__(self, endpoint: IngestEndpoint, clock: VirtualClock, faults: tuple[Fault, ...]):
        self.endpoint = endpoint
        self.clock = clock
        self.outages = [f for f in faults if f.kind == "UplinkOutage"]
        self.dup = [f for f in faults if f.kind == "DuplicateRequest"]
        self.sent: dict[str, int] = {}
        self.dedupe_hits: dict[str, int] = {}
        self.lost: set[str] = set()

    def __call__(self, path: str, body: bytes) -> bytes:
        now = self.clock()
        if any(f.active(now) for f in self.outages):
            raise TransportError("uplink down")
        status, resp = self.endpoint.handle(path, body)
        req = json.loads(body)
        n = sum(1 for r in req["records"] if r.get("kind") != "alert")
        w = req["worker"]
        self.sent[w] = self.sent.get(w, 0) + n
        if json.loads(resp).get("duplicate"):
            self.dedupe_hits[w] = self.dedupe_hits.get(w, 0) + n
        if status != 200:
            raise TransportError(f"HTTP {status}")
        if any(f.active(now) for f in self.dup) and req["request_id"] not in self.lost:
            # delivered, but the response is lost once: the client resends the same request
            self.lost.add(req["request_id"])
            exc = TransportError("response lost")
            exc.transmitted = True
            raise exc
        return resp


def _tagged(samples, worker_index: int, stream: int):
    # merge key: ties at equal ts break by worker, then ECG before accel
    return ((x.ts, worker_index, stream, x.seq, x) for x in samples)


def run_scenario(cfg: ScenarioConfig, *, out_dir: str | Path | None = None, bus=None) -> RunReport:
    """Run ``cfg`` deterministically in virtual time.

    ``bus`` may be a remote BusClient (smoke mode); topics are created on it.
    With ``out_dir`` the report, store log and per-worker CSV exports are
    written there.
    """
    cfg.validate()
    out_dir = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    store_path = cfg.store_path or (out_dir / "store.log" if out_dir else None)
    if store_path is not None and Path(store_path).exists():
        Path(store_path).unlink()

    clock = VirtualClock()
    bus = bus if bus is not None else Bus(clock)
    bus.create_topic(PRIMARY_TOPIC, cfg.partitions)
    bus.create_topic(CLEANSED_TOPIC, cfg.partitions)
    store = Store(store_path, clock=clock)
    endpoint = IngestEndpoint(bus)
    dispatchers = [Dispatcher(bus, store, partitions=[p]) for p in range(cfg.partitions)]
    analytics = AnalyticsJob(list(cfg.windows), store, watermark_ms=cfg.watermark_ms)
    a_consumer = bus.subscribe(CLEANSED_TOPIC, "analytics")
    transport = _Transport(endpoint, clock, cfg.faults)
    redeliver = [f for f in cfg.faults if f.kind == "BusRedeliver"]

    agents: dict[str, EdgeAgent] = {}
    streams: dict[str, WorkerStreams] = {}
    sources = []
    for wi, spec in enumerate(cfg.workers):
        agents[spec.id] = EdgeAgent(spec.id, cfg.edge, cfg.ecg_fs_hz)
        st = streams[spec.id] = generate_streams(spec, cfg)
        sources.append(_tagged(st.ecg, wi, 0))
        sources.append(_tagged(st.accel, wi, 1))
    worker_ids = [w.id for w in cfg.workers]

    def upload(agent: EdgeAgent) -> None:
        agent.upload(transport)

    def cloud_tick(now: int) -> None:
        for d in dispatchers:
            replay = any(f.active(now) for f in redeliver)
            while True:
                if replay:
                    # crash after side effects, before commit: the batch comes back
                    if d.dispatch_once(commit=False) is None:
                        break
                    replay = False
                    continue
                if d.dispatch_once() is None:
                    break
        analytics.consume(a_consumer)
        analytics.tick(now)

    next_upload = cfg.edge.upload_interval_ms
    next_tick = cfg.tick_interval_ms

    def fire_until(t: int) -> None:
        nonlocal next_upload, next_tick
        while min(next_upload, next_tick) <= t:
            if next_upload <= next_tick:
                clock.now = next_upload
                for wid in worker_ids:
                    upload(agents[wid])
                next_upload += cfg.edge.upload_interval_ms
            else:
                clock.now = next_tick
                cloud_tick(next_tick)
                next_tick += cfg.tick_interval_ms

    for ts, wi, stream, _, sample in heapq.merge(*sources):
        fire_until(ts)
        clock.now = ts
        agent = agents[worker_ids[wi]]
        if stream == 0:
            agent.on_ecg(sample)
        else:
            agent.on_accel(sample)
        if agent.want_upload:
            upload(agent)

    clock.now = cfg.duration_ms
    for agent in agents.values():
        agent.finish(cfg.duration_ms)
    analytics.close_stream(cfg.duration_ms)

    def drained() -> bool:
        return (
            all(not len(a.uplink.buffer) and a.uplink.inflight is None for a in agents.values())
            and bus.lag(PRIMARY_TOPIC, "dispatcher") == 0
            and bus.lag(CLEANSED_TOPIC, "analytics") == 0
            and analytics.open_buckets() == 0
            and not analytics.pending
        )

    longest = max((w.window_ms for w in cfg.windows), default=0)
    cap = cfg.duration_ms + longest + cfg.watermark_ms + 4 * (cfg.tick_interval_ms + cfg.edge.upload_interval_ms)
    if cfg.duration_ms > 0:
        t = max(next_upload, next_tick)
        while not drained() or min(next_upload, next_tick) <= cfg.duration_ms:
            if t > cap:
                raise RuntimeError("pipeline did not drain; see log for the stuck stage")
            fire_until(t)
            t = min(next_upload, next_tick)

    report = _report(cfg, clock, store, agents, streams, analytics, endpoint, transport, dispatchers)
    result = RunReport(report, store, agents, streams, analytics, endpoint)
    if out_dir is not None:
        (out_dir / "report.json").write_bytes(result.to_bytes())
        for wid in worker_ids:
            for metric in (w.metric for w in cfg.windows):
                export_series(store, wid, metric, 0, cap + longest, "csv", out_dir / f"{wid}.{metric}.csv")
    store.close()
    return result


def _report(cfg, clock, store, agents, streams, analytics, endpoint, transport, dispatchers) -> dict:
    workers = {}
    raw = sent_bytes = 0
    alert_lat = []
    alerts = []
    for wid, agent in agents.items():
        st = streams[wid]
        late = sum(s[wid].late_drops for s in analytics.stats.values() if wid in s)
        truncated = sum(s[wid].truncated for s in analytics.stats.values() if wid in s)
        workers[wid] = {
            "samples_generated": len(st.ecg) + len(st.accel),
            "r_peaks_truth": len(st.truth.r_peak_times),
            "primaries_produced": len(agent.emitted),
            "primaries_sent": transport.sent.get(wid, 0),
            "dedupe_hits": transport.dedupe_hits.get(wid, 0),
            "records_stored": store.count("primary.rri", wid) + store.count("primary.posture", wid),
            "rri_stored": store.count("primary.rri", wid),
            "posture_stored": store.count("primary.posture", wid),
            "store_duplicates": sum(d.duplicates.get(wid, 0) for d in dispatchers),
            "results_produced": {m: store.count(m, wid) for m in RESULT_METRICS},
            "alerts": len(agent.alert_log),
            "alerts_stored": store.count("alert", wid),
            "late_drops": late,
            "truncated_window_records": truncated,
            "buffer_dropped": agent.uplink.buffer.dropped,
            "requests_sent": agent.uplink.requests_sent,
        }
        raw += agent.raw_bytes
        sent_bytes += agent.uplink.bytes_sent
        episodes = danger_episodes(st.truth)
        for a in agent.alert_log:
            alerts.append(to_dict(a))
            starts = [s for s, _ in episodes if s <= a.raised_ts]
            if starts:
                alert_lat.append(a.raised_ts - max(starts))
    ingest_lat = [x for d in dispatchers for x in d.stats.ingest_latencies]
    pred = predict_bandwidth(cfg)
    return {
        "scenario": {"seed": cfg.seed, "duration_ms": cfg.duration_ms, "workers": len(agents),
                     "faults": [{"kind": f.kind, "start_ms": f.start_ms, "end_ms": f.end_ms} for f in cfg.faults]},
        "workers": workers,
        "bandwidth": {
            "raw_bytes": raw,
            "primary_bytes": sent_bytes,
            "ratio": quantize(raw / sent_bytes) if sent_bytes else None,
            "predicted_ratio": quantize(pred["ratio"]) if pred["ratio"] else None,
        },
        "latency_ms": {
            "alert": percentiles(alert_lat),
            "ingest_to_store": percentiles(ingest_lat),
            "window_end_to_result": percentiles(analytics.latencies),
        },
        "alerts": alerts,
        "end_ts": clock.now,
    }


# ---------------------------------------------------------------- export


def export_series(store: Store, worker: str, metric: str, t0: int, t1: int, fmt: str, path) -> int:
    """Write one worker's series to ``path``; returns the number of rows."""
    if metric not in KNOWN_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}")
    if fmt == "csv" and metric not in RESULT_METRICS:
        raise ValueError(f"CSV export covers analysis results only, not {metric!r}")
    rows = store.scan(worker, metric, t0, t1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "jsonl":
            for r in rows:
                fh.write(r.payload.decode() + "\n")
            return len(rows)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in store.scan_records(worker, metric, t0, t1):
            w.writerow([
                rec.worker, rec.metric, rec.window_start, rec.window_end,
                "" if rec.value is None else repr(rec.value), rec.input_count,
                "true" if rec.insufficient else "false",
            ])
    return len(rows)
