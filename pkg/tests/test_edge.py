import math

import numpy as np
import pytest

from conftest import match_peaks
from vitalstream.bus import PRIMARY_TOPIC, Bus
from vitalstream.dispatcher import Dispatcher
from vitalstream.edge import (
    EdgeAgent,
    EdgeConfig,
    InsufficientDataError,
    PeakDetector,
    StreamOrderError,
    TransportError,
    Uplink,
    UplinkBuffer,
    classify_posture,
    derive_rri,
    detect_all,
    detect_r_peaks,
    evaluate_danger,
    package_upload,
)
from vitalstream.ingest import IngestEndpoint
from vitalstream.model import AccelSample, EcgSample, PostureObservation, RriInterval, decode
from vitalstream.signals import ecg_waveform, synthesize_accel, synthesize_ecg
from vitalstream.store import Store


def test_three_beats_detected_within_8ms():
    samples, truth = synthesize_ecg([800, 800, 800], 250, seed=4)
    peaks = detect_all(samples)
    assert len(peaks) == 3
    for p, t in zip(peaks, truth.r_peak_times):
        assert abs(p - t) <= 8


def test_all_zero_signal_has_no_peaks():
    det = PeakDetector()
    out = [detect_r_peaks(det, EcgSample("w", 4 * k, k, 0.0)) for k in range(5000)]
    assert all(p is None for p in out) and det.flush() == []


def test_refractory_suppresses_close_excursion():
    beats = np.arange(800, 12000, 800, dtype=float)
    extra = 4000 + 150
    ts = np.arange(0, 13000, 4)
    sig = ecg_waveform(ts, np.append(beats, extra))
    peaks = detect_all(EcgSample("w", int(t), k, float(v)) for k, (t, v) in enumerate(zip(ts, sig)))
    assert np.all(np.diff(peaks) >= 200)
    assert not any(abs(p - extra) < 40 for p in peaks)
    _, missed, _ = match_peaks(beats, peaks)
    assert missed == []


def test_at_most_one_peak_per_call():
    samples, _ = synthesize_ecg([800] * 10, 250, seed=2)
    det = PeakDetector()
    for s in samples:
        out = det.push(s)
        assert out is None or isinstance(out, int)


def test_seq_regression_rejected():
    det = PeakDetector()
    det.push(EcgSample("w", 0, 5, 0.0))
    with pytest.raises(StreamOrderError):
        det.push(EcgSample("w", 4, 5, 0.0))


def test_derive_rri_examples():
    assert derive_rri("w1", 800, 1600, None, 0) == RriInterval("w1", 1600, 800, False, 0)
    assert derive_rri("w1", 1600, 4100, 800, 1).artifact
    assert derive_rri("w1", 1600, 2600, 800, 2).artifact  # 25 % jump
    with pytest.raises(ValueError):
        derive_rri("w1", 1600, 1600, 800, 3)


def _window(vec, n=25):
    return [AccelSample("w1", 40 * k, k, *vec) for k in range(n)]


@pytest.mark.parametrize(
    "vec, tilt, label",
    [((0, 1, 0), 0.0, "Upright"), ((0, 0.5, 0.866), 60.0, "DeepBend"), ((0, 0, 1), 90.0, "LyingOrExtreme"),
     ((0, math.cos(math.radians(40)), math.sin(math.radians(40))), 40.0, "Bent")],
)
def test_classify_posture(vec, tilt, label):
    obs = classify_posture(_window(vec))
    assert obs.tilt_deg == pytest.approx(tilt, abs=0.01)
    assert obs.label == label
    assert obs.activity_g == pytest.approx(0, abs=1e-6)


def test_classify_posture_active_and_small_window():
    w = [AccelSample("w1", 40 * k, k, 0.0, 1 + 0.8 * (-1) ** k, 0.0) for k in range(25)]
    assert classify_posture(w).label == "Active"
    with pytest.raises(InsufficientDataError):
        classify_posture(_window((0, 1, 0), 4))


def _obs(ts, label):
    return PostureObservation("w1", ts, 75.0, 0.0, label, ts // 1000)


def test_danger_alert_at_dwell():
    alerts = evaluate_danger([_obs(0, "DeepBend"), _obs(1000, "DeepBend"), _obs(2000, "DeepBend")])
    assert len(alerts) == 1
    assert (alerts[0].onset_ts, alerts[0].raised_ts, alerts[0].dwell_ms) == (0, 2000, 2000)


def test_danger_short_episode_no_alert():
    assert evaluate_danger([_obs(0, "DeepBend"), _obs(1000, "DeepBend"), _obs(1500, "Upright")]) == []


def test_danger_one_alert_per_episode():
    hist = [_obs(t, "DeepBend") for t in range(0, 3001, 1000)]
    hist += [_obs(4000, "Upright")]
    hist += [_obs(t, "LyingOrExtreme") for t in range(5000, 8001, 1000)]
    alerts = evaluate_danger(hist)
    assert [(a.onset_ts, a.raised_ts) for a in alerts] == [(0, 2000), (5000, 7000)]


def test_buffer_drops_oldest():
    b = UplinkBuffer(capacity=3)
    for i in range(5):
        b.append(i)
    assert b.drain(10) == [2, 3, 4] and b.dropped == 2


def _rri(i):
    return RriInterval("w1", 800 * (i + 1), 800, False, i)


def test_package_upload_batches():
    up = Uplink("w1", EdgeConfig(upload_batch_max=200))
    for i in range(350):
        up.buffer.append(_rri(i))
    sizes = []

    def send(path, body):
        import json
        sizes.append(len(json.loads(body)["records"]))
        return b'{"accepted":1}'

    up.flush(send)
    assert sizes == [200, 150]
    assert package_upload(up) is None


def test_empty_buffer_sends_nothing():
    up = Uplink("w1")
    calls = []
    up.flush(lambda p, b: calls.append(b))
    assert calls == [] and up.bytes_sent == 0


def test_failed_request_is_retried_with_same_id():
    up = Uplink("w1")
    for i in range(5):
        up.buffer.append(_rri(i))
    bodies = []

    def down(path, body):
        bodies.append(body)
        raise TransportError("down")

    up.flush(down)
    up.flush(down)
    up.flush(lambda p, b: bodies.append(b) or b'{"accepted":5}')
    assert bodies[0] == bodies[1] == bodies[2]
    assert up.inflight is None and len(up.delivered) == 5


def test_outage_then_recovery_exactly_once_at_store():
    bus = Bus()
    bus.create_topic(PRIMARY_TOPIC, 2)
    bus.create_topic("vital.cleansed", 2)
    store = Store()
    endpoint = IngestEndpoint(bus)
    send_ok = endpoint.transport()
    agent = EdgeAgent("w1", EdgeConfig(upload_batch_max=50))
    samples, _ = synthesize_ecg([800] * 80, seed=7)
    ticks = 0
    for s in samples:
        agent.on_ecg(s)
        if s.ts and s.ts % 5000 == 0:
            ticks += 1
            if ticks <= 3:
                def down(p, b):
                    raise TransportError("no network")
                agent.upload(down)
            else:
                agent.upload(send_ok)
    agent.finish()
    agent.upload(send_ok)
    d = Dispatcher(bus, store)
    while d.dispatch_once() is not None:
        pass
    stored = [decode(r.payload) for r in store.scan("w1", "primary.rri", 0, 10**9)]
    assert stored == [r for r in agent.emitted if isinstance(r, RriInterval)]
    assert len(stored) == 79


def test_alerts_independent_of_uplink(bend_scenario):
    agent = EdgeAgent("w1")
    samples, _ = synthesize_accel(bend_scenario)
    for s in samples:
        agent.on_accel(s)

        def down(p, b):
            raise TransportError("no network")
        agent.upload(down)
    assert len(agent.alert_log) == 1
    a = agent.alert_log[0]
    assert a.onset_ts == 5000 and a.raised_ts == 7000
    assert a in agent.uplink.buffer._q or a in agent.uplink.inflight.records


def test_bandwidth_report_definitions():
    agent = EdgeAgent("w1")
    rep = agent.bandwidth_report()
    assert rep.as_dict() == {"raw_bytes": 0, "primary_bytes": 0, "ratio": None}

    samples, _ = synthesize_ecg([800] * 20, seed=1)
    bodies = []
    for s in samples:
        agent.on_ecg(s)
    agent.finish()
    agent.upload(lambda p, b: bodies.append(b) or b"{}")
    from vitalstream.model import encode
    rep = agent.bandwidth_report()
    assert rep.raw_bytes == sum(len(encode(s)) for s in samples)
    assert rep.primary_bytes == sum(len(b) for b in bodies)
    assert rep.ratio == rep.raw_bytes / rep.primary_bytes


def test_accel_order_enforced():
    agent = EdgeAgent("w1")
    agent.on_accel(AccelSample("w1", 0, 3, 0, 1, 0))
    with pytest.raises(StreamOrderError):
        agent.on_accel(AccelSample("w1", 40, 2, 0, 1, 0))


def test_edge_config_positive():
    with pytest.raises(ValueError):
        EdgeConfig(danger_dwell_ms=0)
