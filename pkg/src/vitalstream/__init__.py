"""Edge/cloud vital-data pipeline: ECG and acceleration in, fatigue and
relaxation series out, with a measurable uplink saving."""

from .analytics import AnalyticsJob, compute_cvi, compute_fatigue, fatigue_score, window_assign
from .bus import Bus, Envelope, fnv1a_64
from .dispatcher import Dispatcher, cleanse
from .edge import EdgeAgent, EdgeConfig, PeakDetector, classify_posture, derive_rri, detect_r_peaks, evaluate_danger
from .harness import ScenarioConfig, default_scenario, export_series, load_scenario, run_scenario
from .ingest import IngestEndpoint
from .model import decode, encode, validate
from .signals import PostureScenario, RrProfile, Segment, build_rr_series, synthesize_accel, synthesize_ecg
from .store import Store, recover

__all__ = [
    "AnalyticsJob",
    "build_rr_series",
    "Bus",
    "classify_posture",
    "cleanse",
    "compute_cvi",
    "compute_fatigue",
    "decode",
    "default_scenario",
    "derive_rri",
    "detect_r_peaks",
    "Dispatcher",
    "EdgeAgent",
    "EdgeConfig",
    "encode",
    "Envelope",
    "evaluate_danger",
    "export_series",
    "fatigue_score",
    "fnv1a_64",
    "IngestEndpoint",
    "load_scenario",
    "PeakDetector",
    "PostureScenario",
    "recover",
    "RrProfile",
    "run_scenario",
    "ScenarioConfig",
    "Segment",
    "Store",
    "synthesize_accel",
    "synthesize_ecg",
    "validate",
    "window_assign",
]

__version__ = "0.1.0"
