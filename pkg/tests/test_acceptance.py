"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see conftest) before asserting.
"""

import math
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from conftest import match_peaks, poincare_oracle, record_criterion

from vitalstream.analytics import AnalyticsJob, Baseline, compute_cvi, compute_fatigue, fatigue_score, window_assign
from vitalstream.edge import detect_all
from vitalstream.harness import Fault, default_scenario, load_scenario, run_scenario
from vitalstream.model import RriInterval, WindowConfig
from vitalstream.signals import RrProfile, build_rr_series, synthesize_ecg
from vitalstream.store import recover, store_record

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def test_c01_r_peak_detection():
    t0 = time.perf_counter()
    se_min = ppv_min = 1.0
    worst_rri = 0.0
    for seed in range(10):
        rr = build_rr_series(RrProfile(seed=1000 + seed), 120_000)
        ecg, truth = synthesize_ecg(rr, 250.0, seed=1000 + seed, duration_ms=120_000)
        peaks = detect_all(ecg, 250.0)
        ref = truth.r_peak_times[3:]
        det = [p for p in peaks if p >= ref[0] - 40]
        pairs, missed, extra = match_peaks(ref, det)
        se_min = min(se_min, len(pairs) / len(ref))
        ppv_min = min(ppv_min, len(pairs) / max(len(det), 1))
        for (t_a, d_a), (t_b, d_b) in zip(pairs, pairs[1:]):
            worst_rri = max(worst_rri, abs((d_b - d_a) - (t_b - t_a)))
    elapsed = time.perf_counter() - t0
    ok = se_min >= 0.99 and ppv_min >= 0.99 and worst_rri <= 8 and elapsed < 5
    record_criterion(1, ok, f"Se_min={se_min:.4f} PPV_min={ppv_min:.4f} max_rri_err={worst_rri:.1f}ms runtime={elapsed:.2f}s")
    assert ok


def test_c02_cvi_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(30, 301))
        x = rng.uniform(300, 2000, n) if rng.random() < 0.3 else rng.normal(800, 40, n)
        _, _, ref = poincare_oracle(x.tolist())
        worst = max(worst, abs(compute_cvi(x).cvi - ref) / abs(ref))
    const = compute_cvi([800] * 30)
    ok = worst <= 1e-9 and const.cvi == -4.0 and const.relaxation_score == 0.0
    record_criterion(2, ok, f"max_rel_err={worst:.2e} constant: cvi={const.cvi} relaxation={const.relaxation_score}")
    assert ok


def test_c03_fatigue():
    example = fatigue_score(720, 20, Baseline("w", 800, 40))
    x = [760, 800, 840, 800] * 10
    first = compute_fatigue(x, None)
    self_score = compute_fatigue(x, first.baseline).fatigue_score
    rng = random.Random(3)
    violations = 0
    for _ in range(1000):
        b = Baseline("w", rng.uniform(400, 1500), rng.uniform(1, 120))
        r = rng.uniform(0, 150)
        m = rng.uniform(300, 2000)
        if fatigue_score(m - rng.uniform(0, 300), r, b) < fatigue_score(m, r, b):
            violations += 1
    ok = example == 30.0 and first.fatigue_score == 0.0 and self_score == 0.0 and violations == 0
    record_criterion(3, ok, f"example={example} self={self_score} monotonicity_violations={violations}/1000")
    assert ok


def test_c04_windowing():
    windows = (WindowConfig("fatigue", 60_000), WindowConfig("relaxation", 120_000))
    rep = run_scenario(default_scenario(windows=windows))
    counts = rep["workers"]["w1"]["results_produced"]
    job = AnalyticsJob(list(windows))
    misplaced = 0
    for k in range(6):
        for cfg in windows:
            job.add(RriInterval("w1", k * cfg.window_ms, 800, False, 100 * k + cfg.window_ms // 60_000))
            misplaced += window_assign(k * cfg.window_ms, cfg.window_ms) != k
    for (_, metric, idx), b in job.buckets.items():
        misplaced += any(window_assign(ts, b.window_ms) != idx for ts, _ in b.values.values())
    ok = counts == {"fatigue": 5, "relaxation": 2} and misplaced == 0
    record_criterion(4, ok, f"results={counts} boundary_misplaced={misplaced}")
    assert ok


def test_c05_exactly_once():
    base = load_scenario(SCENARIOS / "faults.json")
    clean = run_scenario(replace(base, faults=()))
    faulty = run_scenario(replace(base, faults=(Fault("BusRedeliver", 50_000, 150_000),
                                                Fault("DuplicateRequest", 160_000, 260_000))))
    dup_effects = sum(w["store_duplicates"] for w in faulty["workers"].values())
    dedupe = sum(w["dedupe_hits"] for w in faulty["workers"].values())
    a, b = len(faulty.store.keys()), len(clean.store.keys())
    ok = a == b and set(faulty.store.keys()) == set(clean.store.keys()) and dup_effects > 0 and dedupe > 0
    record_criterion(5, ok, f"distinct_keys faulty={a} clean={b} redelivered={dup_effects} dup_request_records={dedupe}")
    assert ok


def test_c06_offline_alerting():
    cfg = load_scenario(SCENARIOS / "bend_outage.json")
    outage = next(f for f in cfg.faults if f.kind == "UplinkOutage")
    rep = run_scenario(cfg)
    episode_start = 100_000
    alerts = rep["alerts"]
    raised = alerts[0]["raised_ts"] if alerts else None
    inside = raised is not None and outage.start_ms <= episode_start and raised < outage.end_ms
    latency = raised - episode_start if raised is not None else math.inf
    agent = rep.agents["w1"]
    produced = {(r.kind, r.seq) for r in agent.emitted}
    stored = {(r.kind, r.seq) for m in ("primary.rri", "primary.posture")
              for r in rep.store.scan_records("w1", m, 0, 10**9)}
    ok = (len(alerts) == 1 and inside and latency <= 3000
          and rep["workers"]["w1"]["alerts_stored"] == 1 and produced == stored)
    record_criterion(6, ok, f"alert_latency={latency}ms raised_during_outage={inside} "
                            f"alert_stored={rep['workers']['w1']['alerts_stored']} primaries {len(stored)}/{len(produced)}")
    assert ok


def test_c07_bandwidth():
    bw = run_scenario(default_scenario())["bandwidth"]
    rel = abs(bw["ratio"] - bw["predicted_ratio"]) / bw["predicted_ratio"]
    ok = bw["ratio"] >= 50 and rel <= 0.10
    record_criterion(7, ok, f"ratio={bw['ratio']:.2f} predicted={bw['predicted_ratio']:.2f} deviation={100 * rel:.1f}%")
    assert ok


def test_c08_determinism(tmp_path):
    cfg = load_scenario(SCENARIOS / "faults.json")
    runs = [run_scenario(cfg, out_dir=tmp_path / d) for d in ("a", "b")]
    names = ["report.json", "store.log"] + [f"{w}.{m}.csv" for w in ("w1", "w2") for m in ("fatigue", "relaxation")]
    differ = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = runs[0].to_bytes() == runs[1].to_bytes() and not differ
    record_criterion(8, ok, f"compared {len(names)} artefacts, differing={differ}")
    assert ok


def _crash_schedule(rng: random.Random, path):
    """Write, crash mid-append, recover; repeat. Returns (expected, recovered) per crash."""
    acked: dict = {}
    checks = []
    seq = 0
    for _ in range(rng.randint(1, 4)):
        store = recover(path)
        for _ in range(rng.randint(0, 40)):
            if acked and rng.random() < 0.2:
                # retry of an already acknowledged record
                store.put(rng.choice(list(acked.values())))
                continue
            rec = store_record(RriInterval(rng.choice(["w1", "w2"]), rng.randint(0, 10**6), rng.randint(300, 2000), False, seq))
            seq += 1
            store.put(rec)
            acked[rec.key] = rec
        store.close()
        # the next append is torn somewhere inside its line
        torn = store_record(RriInterval("w1", 5, 800, False, 10**6 + seq)).to_line()
        with open(path, "ab") as fh:
            fh.write(torn[: rng.randint(1, len(torn) - 1)])
        with recover(path) as r:
            checks.append((set(acked.values()), {r.get(k) for k in r.keys()}))
    return checks


def test_c09_durability(tmp_path):
    rng = random.Random(9)
    bad = 0
    crashes = 0
    for i in range(50):
        for expected, got in _crash_schedule(rng, tmp_path / f"s{i}.log"):
            crashes += 1
            bad += expected != got
    ok = bad == 0
    record_criterion(9, ok, f"50 schedules, {crashes} crashes, mismatched recoveries={bad}")
    assert ok


def test_c10_freshness():
    worst, n, bound = 0, 0, None
    for name in ("default.json", "faults.json"):
        cfg = load_scenario(SCENARIOS / name)
        lat = run_scenario(cfg).analytics.latencies
        bound = cfg.tick_interval_ms + cfg.watermark_ms
        assert lat and all(x >= 0 for x in lat)
        worst, n = max(worst, max(lat)), n + len(lat)
    ok = worst <= bound
    record_criterion(10, ok, f"max window_end_to_result={worst}ms over {n} results, 2 scenarios (bound {bound}ms)")
    assert ok
