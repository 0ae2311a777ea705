"""Deterministic synthetic ECG and accelerometer streams with ground truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import RRI_MAX_MS, RRI_MIN_MS, AccelSample, EcgSample, quantize

log = logging.getLogger(__name__)

ECG_NOISE_SD_MV = 0.02
# (amplitude mV, sigma ms, offset from R ms)
QRS_TEMPLATE = (
    (1.0, 12.0, 0.0),
    (-0.15, 20.0, -40.0),
    (-0.15, 20.0, 40.0),
    (0.3, 60.0, 250.0),
)
ACTIVE_FREQ_HZ = 2.0
ACTIVE_AMPLITUDE_G = 0.4

# nominal pitch used when a scenario does not give one
DEFAULT_THETA = {"Upright": 0.0, "Bent": 40.0, "DeepBend": 75.0, "Lying": 90.0, "Active": 0.0}
THETA_BANDS = {
    "Upright": (0.0, 20.0),
    "Bent": (20.0, 60.0),
    "DeepBend": (60.0, 85.0),
    "Lying": (85.0, 180.0),
    "Active": (0.0, 180.0),
}
# truth postures map onto classifier labels
TRUTH_LABEL = {"Upright": "Upright", "Bent": "Bent", "DeepBend": "DeepBend", "Lying": "LyingOrExtreme", "Active": "Active"}


@dataclass(frozen=True)
class RrProfile:
    mean_rr_ms: float = 800.0
    a_lf_ms: float = 25.0
    f_lf_hz: float = 0.1
    a_hf_ms: float = 20.0
    f_hf_hz: float = 0.25
    drift_ms_per_s: float = 0.0
    noise_sd_ms: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.mean_rr_ms <= 0:
            raise ValueError("mean_rr_ms must be positive")
        if min(self.a_lf_ms, self.a_hf_ms, self.noise_sd_ms) < 0:
            raise ValueError("amplitudes and noise must be non-negative")
        if self.f_lf_hz <= 0 or self.f_hf_hz <= 0:
            raise ValueError("modulation frequencies must be positive")


@dataclass(frozen=True)
class Segment:
    duration_ms: int
    posture: str
    theta_deg: float | None = None

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError("segment duration must be positive")
        if self.posture not in THETA_BANDS:
            raise ValueError(f"unknown posture {self.posture!r}")
        lo, hi = THETA_BANDS[self.posture]
        if not lo <= self.pitch < hi + (1e-9 if self.posture == "Lying" else 0):
            raise ValueError(f"theta {self.pitch} outside the {self.posture} band [{lo}, {hi})")

    @property
    def pitch(self) -> float:
        return DEFAULT_THETA[self.posture] if self.theta_deg is None else float(self.theta_deg)


@dataclass(frozen=True)
class PostureScenario:
    segments: tuple[Segment, ...]
    noise_sd_g: float = 0.02
    seed: int = 0

    @property
    def duration_ms(self) -> int:
        return sum(s.duration_ms for s in self.segments)


@dataclass
class GroundTruth:
    r_peak_times: list[float] = field(default_factory=list)
    # (start_ms, end_ms, truth posture) half-open, contiguous
    segments: list[tuple[int, int, str]] = field(default_factory=list)

    def label_at(self, ts: float) -> str | None:
        for start, end, posture in self.segments:
            if start <= ts < end:
                return TRUTH_LABEL[posture]
        return None


@dataclass
class RrSeries:
    intervals: np.ndarray
    clamped: int = 0

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.intervals, dtype=dtype)


def rr_deterministic(profile: RrProfile, t_ms: float) -> float:
    t = t_ms / 1000.0
    return (
        profile.mean_rr_ms
        + profile.a_lf_ms * np.sin(2 * np.pi * profile.f_lf_hz * t)
        + profile.a_hf_ms * np.sin(2 * np.pi * profile.f_hf_hz * t)
        + profile.drift_ms_per_s * t
    )


def build_rr_series(profile: RrProfile, duration_ms: float) -> RrSeries:
    """Ground-truth RR intervals whose cumulative beat times stay within ``duration_ms``.

    Beat k sits at t_k (t_0 = 0); RR_k is evaluated at t_k, then t_{k+1} = t_k + RR_k.
    Values outside [300, 2000] ms are clamped and counted.
    """
    if duration_ms <= 0:
        raise ValueError("duration_ms must be positive")
    rng = np.random.default_rng(profile.seed)
    out: list[float] = []
    clamped = 0
    any_in_range = False
    t = 0.0
    while True:
        det = rr_deterministic(profile, t)
        any_in_range |= RRI_MIN_MS <= det <= RRI_MAX_MS
        rr = det + (rng.normal(0.0, profile.noise_sd_ms) if profile.noise_sd_ms > 0 else 0.0)
        if rr < RRI_MIN_MS or rr > RRI_MAX_MS:
            rr = min(max(rr, RRI_MIN_MS), RRI_MAX_MS)
            clamped += 1
        if t + rr > duration_ms:
            break
        out.append(float(rr))
        t += rr
    if not any_in_range:
        raise ValueError("RR profile stays outside [300, 2000] ms for the whole run")
    if clamped:
        log.warning("clamped %d RR intervals into [%d, %d] ms", clamped, RRI_MIN_MS, RRI_MAX_MS)
    return RrSeries(np.asarray(out, dtype=float), clamped)


def _sample_times(duration_ms: float, fs_hz: float) -> np.ndarray:
    n = int(np.floor(duration_ms * fs_hz / 1000.0 + 1e-9))
    return np.round(np.arange(n) * 1000.0 / fs_hz).astype(np.int64)


def ecg_waveform(ts: np.ndarray, peaks: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """Sum of Gaussian QRS/T templates at ``peaks`` sampled at ``ts`` (both ms)."""
    sig = np.zeros(len(ts)) if noise is None else noise.astype(float).copy()
    tsf = ts.astype(float)
    for p in peaks:
        lo = np.searchsorted(tsf, p - 500.0)
        hi = np.searchsorted(tsf, p + 600.0)
        if lo == hi:
            continue
        local = tsf[lo:hi]
        for amp, sigma, off in QRS_TEMPLATE:
            sig[lo:hi] += amp * np.exp(-0.5 * ((local - p - off) / sigma) ** 2)
    return sig


def synthesize_ecg(
    rr_series,
    fs_hz: float = 250.0,
    *,
    worker: str = "w1",
    seed: int = 0,
    duration_ms: float | None = None,
    tail_ms: float = 1000.0,
) -> tuple[list[EcgSample], GroundTruth]:
    """Render an ECG stream whose R-peaks sit at the cumulative RR times.

    Without ``duration_ms`` the stream runs ``tail_ms`` past the last beat.
    """
    if fs_hz < 100:
        raise ValueError("fs_hz must be at least 100")
    rr = np.asarray(rr_series, dtype=float)
    peaks = np.cumsum(rr)
    if duration_ms is None:
        duration_ms = float(peaks[-1] + tail_ms) if len(peaks) else 0.0
    ts = _sample_times(duration_ms, fs_hz)
    rng = np.random.default_rng([seed, 1])
    values = ecg_waveform(ts, peaks, rng.normal(0.0, ECG_NOISE_SD_MV, len(ts)))
    samples = [EcgSample(worker, int(t), k, quantize(v)) for k, (t, v) in enumerate(zip(ts.tolist(), values.tolist()))]
    return samples, GroundTruth(r_peak_times=peaks.tolist())


def accel_array(scenario: PostureScenario, fs_hz: float = 25.0) -> tuple[np.ndarray, np.ndarray]:
    """(ts, xyz) arrays for ``scenario``; xyz has shape (n, 3) in g."""
    ts = _sample_times(scenario.duration_ms, fs_hz)
    xyz = np.zeros((len(ts), 3))
    start = 0
    for seg in scenario.segments:
        end = start + seg.duration_ms
        m = (ts >= start) & (ts < end)
        th = np.radians(seg.pitch)
        xyz[m] = (0.0, np.cos(th), np.sin(th))
        if seg.posture == "Active":
            wave = ACTIVE_AMPLITUDE_G * np.sin(2 * np.pi * ACTIVE_FREQ_HZ * ts[m] / 1000.0)
            xyz[m] += wave[:, None]
        start = end
    rng = np.random.default_rng([scenario.seed, 2])
    xyz += rng.normal(0.0, scenario.noise_sd_g, xyz.shape)
    return ts, xyz


def synthesize_accel(
    scenario: PostureScenario, fs_hz: float = 25.0, *, worker: str = "w1"
) -> tuple[list[AccelSample], GroundTruth]:
    """Accelerometer stream in the device frame (x lateral, y toward head, z out of chest)."""
    if not scenario.segments:
        raise ValueError("scenario has no segments")
    ts, xyz = accel_array(scenario, fs_hz)
    samples = [
        AccelSample(worker, int(t), k, quantize(a), quantize(b), quantize(c))
        for k, (t, (a, b, c)) in enumerate(zip(ts.tolist(), xyz.tolist()))
    ]
    truth = GroundTruth()
    start = 0
    for seg in scenario.segments:
        truth.segments.append((start, start + seg.duration_ms, seg.posture))
        start += seg.duration_ms
    return samples, truth


def dump_jsonl(samples, path) -> None:
    from .model import encode

    with open(path, "wb") as fh:
        for s in samples:
            fh.write(encode(s) + b"\n")
