"""Independent reference implementations used by the tests.

These are written for obviousness, not speed: explicit DFT sums, python
loops for scans and recursions, and scipy transfer-function filters in
place of the package's own second-order sections.
"""
import math

import numpy as np
from scipy.signal import butter, lfilter

RATE = 48_000
N = 512
BIN = RATE / N


def detector_intervals(w, a_n1=1e-5, a_n2=1e-6, a_s=1e-2, thr=6.0, warmup=256):
    """Literal transcription of the detector recursion with log10 SNR; S is primed over the warm-up."""
    absw = [abs(float(v)) for v in w]
    srt = sorted(absw)
    mid = len(srt) // 2
    n = srt[mid] if len(srt) % 2 else 0.5 * (srt[mid - 1] + srt[mid])
    s = absw[0]
    for i in range(1, warmup):
        s = a_s * absw[i] + (1 - a_s) * s
    detecting = False
    out, start = [], None
    for i in range(warmup, len(absw)):
        a_n = a_n1 if detecting else a_n2
        n = a_n * absw[i] + (1 - a_n) * n
        s = a_s * absw[i] + (1 - a_s) * s
        snr = -math.inf if s <= 0 or n <= 0 else 20 * math.log10(s) - 20 * math.log10(n)
        if snr > thr:
            if not detecting:
                start = i
            detecting = True
        else:
            if detecting:
                out.append((start, i - 1))
            detecting = False
    if detecting:
        out.append((start, len(absw) - 1))
    return out


def hann(n=N):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def dft_power(frame):
    """|X_k|^2 for k = 0..N/2 by explicit summation over a Hann-windowed frame."""
    x = np.asarray(frame, dtype=np.float64) * hann(len(frame))
    idx = np.arange(len(x))
    return np.array([abs(np.sum(x * np.exp(-2j * np.pi * k * idx / len(x)))) ** 2
                     for k in range(len(x) // 2 + 1)])


def moving_average_8(p):
    """Output i averages inputs i-4..i+3, indices clamped to the ends."""
    out = np.empty(len(p))
    for i in range(len(p)):
        acc = 0.0
        for j in range(i - 4, i + 4):
            acc += p[min(max(j, 0), len(p) - 1)]
        out[i] = acc / 8
    return out


def band_spectrum(window):
    """Smoothed power over bins 11..213; 2048-sample windows average 7 half-overlapping frames."""
    window = np.asarray(window, dtype=np.float64)
    frames = [window[i:i + N] for i in range(0, len(window) - N + 1, N // 2)]
    power = sum(dft_power(f) for f in frames) / len(frames)
    return moving_average_8(power[11:214])


def freqs():
    return np.arange(11, 214) * BIN


def peak_freq(s):
    best = 0
    for i in range(len(s)):
        if s[i] > s[best]:
            best = i
    return 0.0 if s[best] <= 0 else freqs()[best]


def mean_freq(s):
    total = sum(s)
    return 0.0 if total <= 0 else sum(a * f for a, f in zip(s, freqs())) / total


def energy(s, f1, f2):
    return sum(a for a, f in zip(s, freqs()) if f1 <= f < f2)


def width(s, drop_db=8.0, max_gap=3):
    """Walk out from the peak; stop after more than max_gap consecutive sub-threshold bins."""
    if max(s) <= 0:
        return 0.0
    k = int(np.argmax(s))
    thr = s[k] * 10 ** (-drop_db / 10)
    edges = []
    for step in (1, -1):
        last, run, j = k, 0, k + step
        while 0 <= j < len(s) and run <= max_gap:
            if s[j] >= thr:
                last, run = j, 0
            else:
                run += 1
            j += step
        edges.append(last)
    return (edges[0] - edges[1]) * BIN


def rms_band(window, f1, f2):
    """Mean removed, then scipy's order-2 (4-pole) Butterworth in transfer-function form."""
    x = np.asarray(window, dtype=np.float64)
    x = x - x.mean()
    if (f1, f2) != (1000, 20000):
        b, a = butter(2, [f1, f2], btype="bandpass", fs=RATE)
        x = lfilter(b, a, x)
    return math.sqrt(sum(v * v for v in x) / len(x))


def click_recall(click_times, intervals, click_len=48, slack=96):
    """Fraction of clicks whose [onset, onset+len) lies within slack of some detection interval."""
    if len(click_times) == 0:
        return float("nan")
    hit = 0
    for t in click_times:
        lo, hi = t - slack, t + click_len + slack
        if any(s <= hi and e >= lo for s, e in intervals):
            hit += 1
    return hit / len(click_times)
