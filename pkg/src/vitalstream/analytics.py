"""Micro-batch analysis of cleansed RRI: fatigue and relaxation per tumbling window."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import AnalysisResult, CodecError, RriInterval, WindowConfig, decode, quantize
from .store import StoreError

log = logging.getLogger(__name__)

CVI_FLOOR = 1e-4
CVI_LOW, CVI_HIGH = 2.0, 5.0
DEFAULT_WATERMARK_MS = 5000


class InsufficientData(ValueError):
    pass


def window_assign(ts: int, window_ms: int) -> int:
    """Index of the half-open tumbling window [i*W, (i+1)*W) holding ``ts``."""
    return ts // window_ms


@dataclass(frozen=True)
class CviResult:
    sd1: float
    sd2: float
    cvi: float
    relaxation_score: float


def compute_cvi(rri, min_count: int = 30) -> CviResult:
    """Cardiac vagal index from the Poincare plot of successive RRI pairs.

    SD1/SD2 are population SDs of the pair differences and sums (each over
    sqrt 2); CVI = log10(4*SD2 * 4*SD1), floored at 1e-4 inside the log.
    """
    x = np.asarray(rri, dtype=float)
    if len(x) < max(min_count, 2):
        raise InsufficientData(f"{len(x)} RRI values, need {max(min_count, 2)}")
    a, b = x[:-1], x[1:]
    sd1 = float(np.std((b - a) / math.sqrt(2)))
    sd2 = float(np.std((b + a) / math.sqrt(2)))
    cvi = math.log10(max(16.0 * sd1 * sd2, CVI_FLOOR))
    score = min(max(100.0 * (cvi - CVI_LOW) / (CVI_HIGH - CVI_LOW), 0.0), 100.0)
    return CviResult(sd1, sd2, cvi, score)


def rmssd(rri) -> float:
    x = np.asarray(rri, dtype=float)
    if len(x) < 2:
        raise InsufficientData("RMSSD needs at least two values")
    return float(np.sqrt(np.mean(np.diff(x) ** 2)))


@dataclass(frozen=True)
class Baseline:
    worker: str
    baseline_rri_ms: float
    baseline_rmssd_ms: float


def fatigue_score(mean_rri: float, rmssd_ms: float, baseline: Baseline) -> float:
    """Half relative mean-RRI depression, half relative RMSSD depression, clamped to [0, 100]."""
    rri_drop = max(0.0, (baseline.baseline_rri_ms - mean_rri) / baseline.baseline_rri_ms)
    if baseline.baseline_rmssd_ms > 0:
        hrv_drop = max(0.0, (baseline.baseline_rmssd_ms - rmssd_ms) / baseline.baseline_rmssd_ms)
    else:
        hrv_drop = 0.0
    return min(max(100.0 * (0.5 * rri_drop + 0.5 * hrv_drop), 0.0), 100.0)


@dataclass(frozen=True)
class FatigueResult:
    fatigue_score: float
    mean_rri: float
    rmssd: float
    baseline: Baseline


def compute_fatigue(rri, baseline: Baseline | None, *, worker: str = "", min_count: int = 30) -> FatigueResult:
    """Fatigue of one window against the worker's baseline.

    Without a baseline this window becomes it and scores 0.
    """
    x = np.asarray(rri, dtype=float)
    if len(x) < max(min_count, 2):
        raise InsufficientData(f"{len(x)} RRI values, need {max(min_count, 2)}")
    mean = float(x.mean())
    r = rmssd(x)
    if baseline is None:
        baseline = Baseline(worker, mean, r)
        return FatigueResult(0.0, mean, r, baseline)
    return FatigueResult(fatigue_score(mean, r, baseline), mean, r, baseline)


@dataclass
class WindowBucket:
    worker: str
    metric: str
    window_index: int
    window_ms: int
    values: dict[int, tuple[int, int]] = field(default_factory=dict)  # seq -> (ts, rri)
    sealed: bool = False

    @property
    def window_start(self) -> int:
        return self.window_index * self.window_ms

    @property
    def window_end(self) -> int:
        return (self.window_index + 1) * self.window_ms

    def add(self, rec: RriInterval) -> bool:
        """False if ``rec.seq`` is already here (redelivery)."""
        if self.sealed:
            raise ValueError("bucket is sealed")
        if window_assign(rec.ts, self.window_ms) != self.window_index:
            raise ValueError(f"ts {rec.ts} outside window {self.window_index}")
        if rec.seq in self.values:
            return False
        self.values[rec.seq] = (rec.ts, rec.rri_ms)
        return True

    def series(self) -> list[int]:
        return [rri for _, rri in sorted(self.values.values())]


@dataclass
class WorkerStats:
    accepted: int = 0
    late_drops: int = 0
    duplicates: int = 0
    truncated: int = 0
    results: int = 0


class AnalyticsJob:
    """Per-metric tumbling windows over cleansed RRI, sealed by a watermark on ``tick``."""

    def __init__(self, configs: list[WindowConfig] | None = None, store=None, *,
                 watermark_ms: int = DEFAULT_WATERMARK_MS):
        configs = configs or [WindowConfig("fatigue"), WindowConfig("relaxation")]
        self.configs = {c.metric: c for c in configs}
        self.store = store
        self.watermark_ms = watermark_ms
        self.buckets: dict[tuple[str, str, int], WindowBucket] = {}
        # everything ending at or before this has been sealed
        self.sealed_until: dict[str, int] = {m: -1 for m in self.configs}
        self.baselines: dict[str, Baseline] = {}
        self.pending: list[AnalysisResult] = []
        self.results: list[AnalysisResult] = []
        self.latencies: list[int] = []
        self.stats: dict[str, dict[str, WorkerStats]] = {m: {} for m in self.configs}
        self.end_ts: int | None = None

    def _wstats(self, metric: str, worker: str) -> WorkerStats:
        return self.stats[metric].setdefault(worker, WorkerStats())

    def add(self, rec: RriInterval) -> None:
        for metric, cfg in self.configs.items():
            st = self._wstats(metric, rec.worker)
            idx = window_assign(rec.ts, cfg.window_ms)
            if (idx + 1) * cfg.window_ms <= self.sealed_until[metric]:
                st.late_drops += 1
                continue
            if self.end_ts is not None and (idx + 1) * cfg.window_ms > self.end_ts:
                st.truncated += 1
                continue
            key = (rec.worker, metric, idx)
            b = self.buckets.get(key)
            if b is None:
                b = self.buckets[key] = WindowBucket(rec.worker, metric, idx, cfg.window_ms)
            if b.add(rec):
                st.accepted += 1
            else:
                st.duplicates += 1

    def consume(self, consumer, max_messages: int = 10_000) -> int:
        """Drain the cleansed topic into buckets; commits after bucketing."""
        n = 0
        while batch := consumer.poll(max_messages):
            for env in batch:
                try:
                    rec = decode(env.payload)
                except CodecError:
                    continue
                if isinstance(rec, RriInterval) and not rec.artifact:
                    self.add(rec)
            consumer.commit_batch(batch)
            n += len(batch)
        return n

    def tick(self, now_ts: int) -> list[AnalysisResult]:
        """Seal every window ending at or before ``now_ts - watermark`` and store its result."""
        horizon = now_ts - self.watermark_ms
        for metric in self.configs:
            self.sealed_until[metric] = max(self.sealed_until[metric], horizon)
        ready = sorted(
            (b for b in self.buckets.values() if not b.sealed and b.window_end <= horizon),
            key=lambda b: (b.worker, b.metric, b.window_index),
        )
        for b in ready:
            b.sealed = True
            self.pending.append(self._evaluate(b))
        out = []
        while self.pending:
            res = self.pending[0]
            if self.store is not None:
                try:
                    self.store.put_record(res)
                except (StoreError, OSError):
                    log.warning("result store failed; retrying next tick")
                    break
            self.pending.pop(0)
            self.results.append(res)
            self.latencies.append(now_ts - res.window_end)
            self._wstats(res.metric, res.worker).results += 1
            out.append(res)
        # sealed buckets are dropped once their result is out
        for b in ready:
            del self.buckets[(b.worker, b.metric, b.window_index)]
        return out

    def close_stream(self, end_ts: int) -> int:
        """Mark the end of input: windows running past ``end_ts`` can never
        complete, so their records are discarded (counted as truncated).
        Returns the number of buckets dropped."""
        self.end_ts = end_ts
        gone = [k for k, b in self.buckets.items() if b.window_end > end_ts]
        for k in gone:
            b = self.buckets.pop(k)
            self._wstats(b.metric, b.worker).truncated += len(b.values)
        return len(gone)

    def _evaluate(self, b: WindowBucket) -> AnalysisResult:
        cfg = self.configs[b.metric]
        series = b.series()
        n = len(series)
        base = dict(worker=b.worker, metric=b.metric, window_start=b.window_start,
                    window_end=b.window_end, input_count=n)
        if n < cfg.min_rri_per_window:
            return AnalysisResult(insufficient=True, **base)
        if b.metric == "relaxation":
            c = compute_cvi(series, cfg.min_rri_per_window)
            return AnalysisResult(insufficient=False, value=quantize(c.relaxation_score), cvi=quantize(c.cvi), **base)
        f = compute_fatigue(series, self.baselines.get(b.worker), worker=b.worker, min_count=cfg.min_rri_per_window)
        self.baselines.setdefault(b.worker, f.baseline)
        return AnalysisResult(insufficient=False, value=quantize(f.fatigue_score), **base)

    def open_buckets(self) -> int:
        return len(self.buckets)


def run_microbatch_tick(now_ts: int, job: AnalyticsJob) -> list[AnalysisResult]:
    return job.tick(now_ts)
