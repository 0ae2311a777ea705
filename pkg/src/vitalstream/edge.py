"""Edge-side stream processing: raw ECG/acceleration in, primary records and alerts out."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import (
    DANGEROUS_LABELS,
    AccelSample,
    Alert,
    EcgSample,
    PostureObservation,
    RriInterval,
    dumps,
    encode,
    is_artifact,
    quantize,
    to_dict,
)

log = logging.getLogger(__name__)

INGEST_PATH = "/v1/ingest"


class StreamOrderError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class TransportError(ConnectionError):
    """Upload did not complete; the request will be retried unchanged."""


@dataclass(frozen=True)
class EdgeConfig:
    upload_batch_max: int = 200
    upload_interval_ms: int = 5000
    posture_window_ms: int = 1000
    danger_tilt_deg: float = 60.0
    danger_dwell_ms: int = 2000
    activity_threshold_g: float = 0.3
    buffer_capacity: int = 100_000

    def __post_init__(self):
        for name in ("upload_batch_max", "upload_interval_ms", "posture_window_ms",
                     "danger_tilt_deg", "danger_dwell_ms", "activity_threshold_g", "buffer_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------- R-peaks


class PeakDetector:
    """Streaming Pan-Tompkins-style R-peak detector.

    Pipeline per sample: moving-average low-pass, moving-average high-pass
    (the two together form a rough 5-15 Hz band), five-point derivative,
    squaring and a 150 ms moving-window integrator. Peaks of the integrated
    signal are classified against adaptive signal/noise levels; accepted
    ones are mapped back to the largest raw sample within 40 ms of the
    delay-compensated location.

    The first ``learn_ms`` of signal only trains the thresholds; candidates
    seen during that phase are classified retroactively once it ends, so the
    very first beats are not lost. Detected peaks are queued and released
    one per call.
    """

    REFRACTORY_MS = 200
    SEARCH_MS = 40
    INTEGRATOR_MS = 150

    def __init__(self, fs_hz: float = 250.0, learn_ms: float = 2000.0):
        self.fs = fs_hz
        dt = 1000.0 / fs_hz
        self.dt = dt
        self.n_lp = max(3, round(0.02 * fs_hz))
        self.n_hp = max(5, round(0.1 * fs_hz)) | 1
        self.n_mwi = max(3, round(self.INTEGRATOR_MS / 1000 * fs_hz))
        self.lookahead = max(2, round(0.1 * fs_hz))
        self.search = max(1, round(self.SEARCH_MS / dt))
        # integrated-signal peak -> raw R position, in samples
        self.delay = (self.n_lp - 1) / 2 + (self.n_hp - 1) / 2 + 2 + self.n_mwi / 2
        self.learn_ms = learn_ms

        self._lp_buf: deque[float] = deque(maxlen=self.n_lp)
        self._lp_sum = 0.0
        self._hp_buf: deque[float] = deque(maxlen=self.n_hp)
        self._hp_sum = 0.0
        self._d_buf: deque[float] = deque([0.0] * 5, maxlen=5)
        self._mwi_buf: deque[float] = deque(maxlen=self.n_mwi)
        self._mwi_sum = 0.0

        keep = int(self.lookahead + self.delay + self.search + 8)
        self._raw: deque[tuple[int, float]] = deque(maxlen=keep + self.lookahead + 4)
        # (index, value) of recent integrated samples, monotone for running max
        self._mwi_hist: deque[tuple[int, float, int]] = deque(maxlen=2 * self.lookahead + 1)
        self._maxq: deque[tuple[int, float]] = deque()

        self.n = -1
        self.last_seq: int | None = None
        self.t0: int | None = None
        self.learning = True
        self._learn_max = 0.0
        self._learn_sum = 0.0
        self._learn_n = 0
        self._learn_cands: list[tuple[int, float]] = []

        self.spk = 0.0
        self.npk = 0.0
        self.last_peak_ts: int | None = None
        self.rr_recent: deque[int] = deque(maxlen=8)
        self._noise_cands: list[tuple[int, float]] = []
        self.pending: deque[int] = deque()

    @property
    def threshold(self) -> float:
        return self.npk + 0.25 * (self.spk - self.npk)

    def push(self, sample: EcgSample) -> int | None:
        return self.step(sample.seq, sample.ts, sample.value)

    def step(self, seq: int, ts: int, value: float) -> int | None:
        if self.last_seq is not None and seq <= self.last_seq:
            raise StreamOrderError(f"sample seq {seq} after {self.last_seq}")
        self.last_seq = seq
        self.n += 1
        n = self.n
        if self.t0 is None:
            self.t0 = ts
        self._raw.append((ts, value))

        # low-pass
        if len(self._lp_buf) == self.n_lp:
            self._lp_sum -= self._lp_buf[0]
        self._lp_buf.append(value)
        self._lp_sum += value
        lp = self._lp_sum / len(self._lp_buf)
        # high-pass: centre sample minus the window mean
        if len(self._hp_buf) == self.n_hp:
            self._hp_sum -= self._hp_buf[0]
        self._hp_buf.append(lp)
        self._hp_sum += lp
        if len(self._hp_buf) < self.n_hp:
            hp = 0.0
        else:
            hp = self._hp_buf[self.n_hp // 2] - self._hp_sum / self.n_hp
        d = self._d_buf
        d.append(hp)
        deriv = (2 * d[4] + d[3] - d[1] - 2 * d[0]) / 8.0
        sq = deriv * deriv
        if len(self._mwi_buf) == self.n_mwi:
            self._mwi_sum -= self._mwi_buf[0]
        self._mwi_buf.append(sq)
        self._mwi_sum += sq
        mwi = max(self._mwi_sum, 0.0) / self.n_mwi

        # running max over the last 2*lookahead+1 integrated samples
        q = self._maxq
        while q and q[-1][1] <= mwi:
            q.pop()
        q.append((n, mwi))
        if q[0][0] < n - 2 * self.lookahead:
            q.popleft()
        self._mwi_hist.append((n, mwi, ts))

        if self.learning:
            self._learn_max = max(self._learn_max, mwi)
            self._learn_sum += mwi
            self._learn_n += 1

        if n >= 2 * self.lookahead:
            ci, cv, _ = self._mwi_hist[self.lookahead]
            # centre of the window is its maximum
            if cv > 0.0 and self._is_window_peak(ci, cv):
                r_ts = self._locate_raw(ci)
                if r_ts is not None:
                    self._candidate(r_ts, cv)

        if self.learning and ts - self.t0 >= self.learn_ms and self._learn_max > 1e-12:
            self._finish_learning()

        self._searchback(ts)
        return self.pending.popleft() if self.pending else None

    def flush(self) -> list[int]:
        """End of stream: settle the look-ahead tail and return all queued peaks."""
        out = []
        if self._raw:
            ts, v = self._raw[-1]
            for k in range(1, 2 * self.lookahead + self.n_mwi + 1):
                p = self.step(self.last_seq + 1, ts + round(k * self.dt), v)
                if p is not None:
                    out.append(p)
            if self.learning and self._learn_max > 1e-12:
                self._finish_learning()
        out.extend(self.pending)
        self.pending.clear()
        return out

    def _is_window_peak(self, ci: int, cv: float) -> bool:
        # ci is the centre of the current history window
        if self._maxq[0][1] > cv:
            return False
        # ties: only the earliest sample counts as the peak
        for i, v, _ in self._mwi_hist:
            if i >= ci:
                break
            if v >= cv:
                return False
        return True

    def _locate_raw(self, ci: int) -> int | None:
        centre = ci - self.delay
        lo = centre - self.search
        hi = centre + self.search
        first = self.n - len(self._raw) + 1
        best_ts, best_v = None, -math.inf
        for k in range(max(math.ceil(lo), first), min(math.floor(hi), self.n) + 1):
            t, v = self._raw[k - first]
            if v > best_v:
                best_ts, best_v = t, v
        return best_ts

    def _candidate(self, r_ts: int, level: float) -> None:
        if self.learning:
            self._learn_cands.append((r_ts, level))
            return
        self._classify(r_ts, level)

    def _finish_learning(self) -> None:
        self.learning = False
        self.spk = 0.25 * self._learn_max
        self.npk = 0.5 * self._learn_sum / max(self._learn_n, 1)
        cands, self._learn_cands = self._learn_cands, []
        for r_ts, level in cands:
            self._classify(r_ts, level)

    def _classify(self, r_ts: int, level: float) -> None:
        if self.last_peak_ts is not None and r_ts - self.last_peak_ts < self.REFRACTORY_MS:
            return
        if level > self.threshold:
            self.spk = 0.125 * level + 0.875 * self.spk
            self._accept(r_ts)
        else:
            self.npk = 0.125 * level + 0.875 * self.npk
            self._noise_cands.append((r_ts, level))

    def _accept(self, r_ts: int) -> None:
        if self.last_peak_ts is not None:
            self.rr_recent.append(r_ts - self.last_peak_ts)
        self.last_peak_ts = r_ts
        self._noise_cands.clear()
        self.pending.append(r_ts)

    def _searchback(self, now_ts: int) -> None:
        if self.learning or self.last_peak_ts is None or len(self.rr_recent) < 2:
            return
        rr_avg = sum(self.rr_recent) / len(self.rr_recent)
        if now_ts - self.last_peak_ts <= 1.66 * rr_avg:
            return
        thr2 = 0.5 * self.threshold
        best = None
        for r_ts, level in self._noise_cands:
            if r_ts - self.last_peak_ts >= 360 and level > thr2 and (best is None or level > best[1]):
                best = (r_ts, level)
        if best is not None:
            self.spk = 0.25 * best[1] + 0.75 * self.spk
            self._accept(best[0])


def detect_r_peaks(state: PeakDetector, sample: EcgSample) -> int | None:
    """Feed one sample; returns the ts of a detected R-peak or None."""
    return state.push(sample)


def detect_all(samples: Iterable[EcgSample], fs_hz: float = 250.0) -> list[int]:
    det = PeakDetector(fs_hz)
    peaks = [p for s in samples if (p := det.push(s)) is not None]
    return peaks + det.flush()


# ---------------------------------------------------------------- RRI


def derive_rri(worker: str, prev_peak_ts: int, new_peak_ts: int, prev_rri: int | None, seq: int) -> RriInterval:
    if new_peak_ts <= prev_peak_ts:
        raise ValueError(f"peak ts {new_peak_ts} does not follow {prev_peak_ts}")
    rri = int(new_peak_ts - prev_peak_ts)
    return RriInterval(worker, int(new_peak_ts), rri, is_artifact(rri, prev_rri), seq)


# ---------------------------------------------------------------- posture


def posture_label(tilt_deg: float, activity_g: float, activity_threshold_g: float = 0.3) -> str:
    if activity_g > activity_threshold_g:
        return "Active"
    if tilt_deg < 20:
        return "Upright"
    if tilt_deg < 60:
        return "Bent"
    if tilt_deg < 85:
        return "DeepBend"
    return "LyingOrExtreme"


def classify_posture(
    window: Sequence[AccelSample] | np.ndarray,
    config: EdgeConfig = EdgeConfig(),
    *,
    worker: str | None = None,
    ts: int | None = None,
    seq: int = 0,
) -> PostureObservation:
    """Classify one window of accelerometer samples.

    ``window`` is either AccelSamples or an (n, 3) array; ``ts`` defaults to
    the first sample's timestamp.
    """
    if isinstance(window, np.ndarray):
        xyz = window
    else:
        xyz = np.array([(s.ax, s.ay, s.az) for s in window], dtype=float).reshape(-1, 3)
        if len(window):
            worker = worker or window[0].worker
            ts = window[0].ts if ts is None else ts
    if len(xyz) < 5:
        raise InsufficientDataError(f"posture window has {len(xyz)} samples, need at least 5")
    g = xyz.mean(axis=0)
    norm = float(np.linalg.norm(g))
    gy = g[1] / norm if norm > 0 else 1.0
    tilt = math.degrees(math.acos(min(1.0, max(-1.0, gy))))
    activity = float(np.linalg.norm(xyz, axis=1).std())
    # reported at 0.01 deg; the label is derived from the reported value
    tilt, activity = round(tilt, 2) + 0.0, quantize(activity)
    label = posture_label(tilt, activity, config.activity_threshold_g)
    return PostureObservation(worker or "", int(ts or 0), tilt, activity, label, seq)


class DangerEvaluator:
    """Tracks contiguous dangerous-posture runs; one alert per run."""

    def __init__(self, config: EdgeConfig = EdgeConfig()):
        self.config = config
        self.onset: int | None = None
        self.alerted = False

    def update(self, obs: PostureObservation) -> Alert | None:
        if obs.label not in DANGEROUS_LABELS:
            self.onset = None
            self.alerted = False
            return None
        if self.onset is None:
            self.onset = obs.ts
        dwell = obs.ts - self.onset
        if not self.alerted and dwell >= self.config.danger_dwell_ms:
            self.alerted = True
            return Alert(obs.worker, self.onset, obs.ts, dwell)
        return None


def evaluate_danger(history: Iterable[PostureObservation], config: EdgeConfig = EdgeConfig()) -> list[Alert]:
    ev = DangerEvaluator(config)
    return [a for obs in history if (a := ev.update(obs)) is not None]


# ---------------------------------------------------------------- uplink


class UplinkBuffer:
    """Bounded FIFO; overflow evicts the oldest record and counts it."""

    def __init__(self, capacity: int = 100_000):
        self.capacity = capacity
        self._q: deque = deque()
        self.dropped = 0

    def __len__(self):
        return len(self._q)

    def append(self, record) -> None:
        if len(self._q) >= self.capacity:
            self._q.popleft()
            self.dropped += 1
        self._q.append(record)

    def drain(self, n: int) -> list:
        return [self._q.popleft() for _ in range(min(n, len(self._q)))]


@dataclass
class IngestRequest:
    request_id: str
    worker: str
    records: list

    def body(self) -> bytes:
        return dumps({"request_id": self.request_id, "worker": self.worker, "records": [to_dict(r) for r in self.records]})


class Uplink:
    """Packages buffered records into IngestRequests and retries failures verbatim."""

    def __init__(self, worker: str, config: EdgeConfig = EdgeConfig()):
        self.worker = worker
        self.config = config
        self.buffer = UplinkBuffer(config.buffer_capacity)
        self.inflight: IngestRequest | None = None
        self._next_id = 0
        self.bytes_sent = 0
        self.requests_sent = 0
        self.delivered: list = []

    def package(self) -> IngestRequest | None:
        if self.inflight is None:
            if not len(self.buffer):
                return None
            records = self.buffer.drain(self.config.upload_batch_max)
            self.inflight = IngestRequest(f"{self.worker}-{self._next_id:08d}", self.worker, records)
            self._next_id += 1
        return self.inflight

    def flush(self, send: Callable[[str, bytes], bytes]) -> int:
        """Send requests until the buffer is empty or the transport fails.

        ``send(path, body)`` returns the response body or raises
        TransportError; bytes count toward the bandwidth total once they
        reach the transport, failed or not.
        """
        n = 0
        while (req := self.package()) is not None:
            body = req.body()
            try:
                send(INGEST_PATH, body)
            except TransportError as exc:
                if getattr(exc, "transmitted", False):
                    self.bytes_sent += len(body)
                    self.requests_sent += 1
                return n
            self.bytes_sent += len(body)
            self.requests_sent += 1
            self.delivered.extend(req.records)
            self.inflight = None
            n += 1
        return n


def package_upload(uplink: Uplink) -> IngestRequest | None:
    return uplink.package()


@dataclass
class BandwidthReport:
    raw_bytes: int = 0
    primary_bytes: int = 0

    @property
    def ratio(self) -> float | None:
        return self.raw_bytes / self.primary_bytes if self.primary_bytes else None

    def as_dict(self) -> dict:
        r = self.ratio
        return {"raw_bytes": self.raw_bytes, "primary_bytes": self.primary_bytes, "ratio": None if r is None else quantize(r)}


# ---------------------------------------------------------------- agent


@dataclass
class EdgeAgent:
    """One worker's smartphone: a single-threaded state machine over its samples.

    Alerts go to ``alert_log`` the moment they are raised and are also queued
    for upload, so a dead uplink never holds them back.
    """

    worker: str
    config: EdgeConfig = field(default_factory=EdgeConfig)
    ecg_fs_hz: float = 250.0
    on_alert: Callable[[Alert], None] | None = None

    def __post_init__(self):
        self.detector = PeakDetector(self.ecg_fs_hz)
        self.danger = DangerEvaluator(self.config)
        self.uplink = Uplink(self.worker, self.config)
        self.alert_log: list[Alert] = []
        self.emitted: list = []
        self.raw_bytes = 0
        self._prev_peak: int | None = None
        self._prev_rri: int | None = None
        self._rri_seq = 0
        self._posture_seq = 0
        self._win_index: int | None = None
        self._win: list[tuple[float, float, float]] = []
        self._last_accel_seq: int | None = None
        self.want_upload = False

    # samples ---------------------------------------------------------

    def on_ecg(self, sample: EcgSample) -> None:
        self.raw_bytes += len(encode(sample))
        peak = self.detector.push(sample)
        if peak is not None:
            self._on_peak(peak)

    def on_accel(self, sample: AccelSample) -> None:
        if self._last_accel_seq is not None and sample.seq <= self._last_accel_seq:
            raise StreamOrderError(f"accel seq {sample.seq} after {self._last_accel_seq}")
        self._last_accel_seq = sample.seq
        self.raw_bytes += len(encode(sample))
        W = self.config.posture_window_ms
        idx = sample.ts // W
        if self._win_index is not None and idx != self._win_index:
            self._close_window()
        self._win_index = idx
        self._win.append((sample.ax, sample.ay, sample.az))

    def finish(self, end_ts: int | None = None) -> None:
        """End of stream at ``end_ts``: release queued peaks and close the last
        posture window if the stream covered all of it (partial ones are discarded)."""
        for p in self.detector.flush():
            self._on_peak(p)
        W = self.config.posture_window_ms
        if self._win_index is not None and end_ts is not None and (self._win_index + 1) * W <= end_ts:
            self._close_window()
        self._win = []
        self._win_index = None

    def _on_peak(self, ts: int) -> None:
        if self._prev_peak is not None:
            rec = derive_rri(self.worker, self._prev_peak, ts, self._prev_rri, self._rri_seq)
            self._rri_seq += 1
            self._prev_rri = rec.rri_ms
            self._emit(rec)
        self._prev_peak = ts

    def _close_window(self) -> None:
        win, self._win = self._win, []
        if len(win) < 5:
            return
        obs = classify_posture(
            np.asarray(win), self.config, worker=self.worker,
            ts=self._win_index * self.config.posture_window_ms, seq=self._posture_seq,
        )
        self._posture_seq += 1
        self._emit(obs)
        alert = self.danger.update(obs)
        if alert is not None:
            self.alert_log.append(alert)
            log.info("dangerous posture: %s", alert)
            if self.on_alert:
                self.on_alert(alert)
            self.uplink.buffer.append(alert)

    def _emit(self, record) -> None:
        self.emitted.append(record)
        self.uplink.buffer.append(record)
        if len(self.uplink.buffer) >= self.config.upload_batch_max:
            self.want_upload = True

    # uplink ----------------------------------------------------------

    def upload(self, send: Callable[[str, bytes], bytes]) -> int:
        self.want_upload = False
        return self.uplink.flush(send)

    def bandwidth_report(self) -> BandwidthReport:
        return BandwidthReport(self.raw_bytes, self.uplink.bytes_sent)
