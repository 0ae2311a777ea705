import math

import pytest

from vitalstream.signals import PostureScenario, RrProfile, Segment


def poincare_oracle(x):
    """Brute-force SD1, SD2, CVI straight from the definitions (pure Python, fsum)."""
    d = [(x[i + 1] - x[i]) / math.sqrt(2) for i in range(len(x) - 1)]
    s = [(x[i + 1] + x[i]) / math.sqrt(2) for i in range(len(x) - 1)]

    def psd(v):
        m = math.fsum(v) / len(v)
        return math.sqrt(math.fsum((a - m) ** 2 for a in v) / len(v))

    sd1, sd2 = psd(d), psd(s)
    return sd1, sd2, math.log10(max(16 * sd1 * sd2, 1e-4))


def match_peaks(truth, detected, tol=40.0):
    """Greedy one-to-one matching within ``tol`` ms; returns (pairs, unmatched_truth, unmatched_detected)."""
    detected = sorted(detected)
    used = set()
    pairs = []
    missed = []
    j = 0
    for t in truth:
        while j < len(detected) and detected[j] < t - tol:
            j += 1
        k = j
        best = None
        while k < len(detected) and detected[k] <= t + tol:
            if k not in used and (best is None or abs(detected[k] - t) < abs(detected[best] - t)):
                best = k
            k += 1
        if best is None:
            missed.append(t)
        else:
            used.add(best)
            pairs.append((t, detected[best]))
    extra = [d for i, d in enumerate(detected) if i not in used]
    return pairs, missed, extra


@pytest.fixture
def flat_profile():
    return RrProfile(mean_rr_ms=800, a_lf_ms=0, a_hf_ms=0, noise_sd_ms=0, seed=1)


@pytest.fixture
def bend_scenario():
    return PostureScenario(
        (Segment(5000, "Upright"), Segment(4000, "DeepBend", 75), Segment(5000, "Upright")), seed=3
    )


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
