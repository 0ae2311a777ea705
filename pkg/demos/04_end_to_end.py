"""
A whole shift in virtual time
=============================

Two workers for five minutes, with an uplink outage, bus redelivery and
lost HTTP responses. Everything runs in simulated time so the numbers
below are the same on every machine.
"""

from pathlib import Path

from vitalstream.harness import load_scenario, predict_bandwidth, run_scenario

cfg = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "faults.json")
for f in cfg.faults:
    print(f"fault {f.kind:16s} [{f.start_ms // 1000}, {f.end_ms // 1000}) s")

rep = run_scenario(cfg)

for wid, c in rep["workers"].items():
    print(f"\n{wid}: {c['primaries_produced']} primaries produced, {c['primaries_sent']} sent, "
          f"{c['dedupe_hits']} dropped as duplicate requests, {c['records_stored']} stored")
    print(f"    results {c['results_produced']}, late records {c['late_drops']}, alerts {c['alerts']}")

bw = rep["bandwidth"]
print(f"\nuplink: {bw['raw_bytes'] / 1e6:.1f} MB raw vs {bw['primary_bytes'] / 1e3:.1f} kB sent, "
      f"ratio {bw['ratio']:.1f} (no-fault prediction {predict_bandwidth(cfg)['ratio']:.1f})")
for name, p in rep["latency_ms"].items():
    print(f"latency {name:22s} p50={p['p50']} p95={p['p95']} max={p['max']}")
for a in rep["alerts"]:
    print(f"alert {a['worker']}: posture dangerous from {a['onset_ts']} ms, raised at {a['raised_ts']} ms")

# the fatigue series of w1, straight from the store
for r in rep.store.scan_records("w1", "fatigue", 0, 10**9):
    print(f"w1 fatigue [{r.window_start // 1000:3d}, {r.window_end // 1000:3d}) s: {r.value}")
