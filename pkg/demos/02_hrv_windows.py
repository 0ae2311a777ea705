"""
Fatigue and relaxation over tumbling windows
============================================

A worker whose heart rate creeps up and whose variability shrinks over
five minutes. Each minute is scored against the first one.
"""

import numpy as np

from vitalstream.analytics import AnalyticsJob, compute_cvi
from vitalstream.model import RriInterval, WindowConfig
from vitalstream.signals import RrProfile, build_rr_series

# the Poincare plot of a steady, lively series
rr = build_rr_series(RrProfile(seed=2), 60_000)
c = compute_cvi(rr.intervals)
print(f"SD1={c.sd1:.1f} ms  SD2={c.sd2:.1f} ms  CVI={c.cvi:.3f}  relaxation={c.relaxation_score:.1f}")

# now a drifting series: -0.4 ms/s on the mean, variability damped over time
rng = np.random.default_rng(0)
records, t, seq = [], 0.0, 0
while t < 300_000:
    damp = 1.0 - t / 400_000
    rr_ms = 820 - 0.4 * t / 1000 + damp * 30 * np.sin(2 * np.pi * 0.25 * t / 1000) + rng.normal(0, 4)
    t += rr_ms
    records.append(RriInterval("w1", int(t), int(round(rr_ms)), False, seq))
    seq += 1

job = AnalyticsJob([WindowConfig("fatigue", 60_000), WindowConfig("relaxation", 60_000)])
for r in records:
    job.add(r)
job.close_stream(300_000)

# a micro-batch tick every 10 s, results appear once a window is 5 s past its end
for now in range(10_000, 320_001, 10_000):
    for res in job.tick(now):
        extra = f"  cvi={res.cvi:.3f}" if res.cvi is not None else ""
        print(f"t={now // 1000:3d}s  {res.metric:10s} [{res.window_start // 1000:3d}, {res.window_end // 1000:3d}) s"
              f"  n={res.input_count:3d}  value={res.value:6.2f}{extra}")
