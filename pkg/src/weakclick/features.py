"""Per-window acoustic features, spectral profiles and spectrogram images.

All spectral quantities come from a 512-point periodic Hann FFT at 48 kHz
(93.75 Hz bins).  Windows are processed independently, so features of
concatenated audio are the concatenation of the features.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter1d
from scipy.signal import sosfilt

from . import fileio
from .audio import AudioSegment, butter_bandpass_sos

RATE = 48_000
NFFT = 512
HOP = 256
BIN_HZ = RATE / NFFT
SMOOTH = 8
WIDTH_DROP_DB = 8.0
MAX_GAP = 3

# 1-20 kHz: bins 11 (1031.25 Hz) to 213 (19968.75 Hz)
BAND_LO, BAND_HI = 11, 213
FREQS = np.arange(BAND_LO, BAND_HI + 1) * BIN_HZ
# length-200 profile uses bins 11..210
PROFILE_BINS = 200

SPEC_WINDOW = 32_768
SPEC_HOP = 32_640  # 0.68 s
SPEC_SIZE = 128

_HANN = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(NFFT) / NFFT)


class FeatureCombination(enum.Enum):
    RMS1 = "Rms1"
    RMS3 = "Rms3"
    RMS5 = "Rms5"
    SPECTRAL4 = "Spectral4"
    SPECTRAL7 = "Spectral7"

    @property
    def channels(self) -> list[str]:
        return _CHANNELS[self]

    @property
    def m(self) -> int:
        return len(self.channels)

    @classmethod
    def parse(cls, name: str) -> "FeatureCombination":
        for c in cls:
            if c.value.lower() == name.lower():
                return c
        raise ValueError(f"unknown feature combination {name!r}; choose from {[c.value for c in cls]}")


_CHANNELS = {
    FeatureCombination.RMS1: ["rms_1_20"],
    FeatureCombination.RMS3: ["rms_1_6", "rms_6_12", "rms_12_20"],
    FeatureCombination.RMS5: ["rms_1_2", "rms_2_4", "rms_4_8", "rms_8_16", "rms_16_20"],
    FeatureCombination.SPECTRAL4: ["rms_1_20", "pkf", "mean_f", "width"],
    FeatureCombination.SPECTRAL7: ["rms_1_20", "pkf", "mean_f", "width", "e_1_4", "e_4_8", "e_8_16"],
}


@dataclass(frozen=True)
class SpectralFrame:
    s: np.ndarray
    f: np.ndarray = field(default_factory=lambda: FREQS.copy())
    bin_width: float = BIN_HZ

    @property
    def is_zero(self) -> bool:
        return not np.any(self.s > 0)


@dataclass
class HandcraftedFeatureSet:
    rms: dict[tuple[int, int], float]
    pkf: float
    mean_f: float
    width: float
    energy: dict[tuple[int, int], float]
    degenerate: bool = False


@dataclass
class FeatureSequence:
    data: np.ndarray  # (m, n)
    combo: str
    window: int
    source: str = ""
    label: str = ""
    deployment: str = ""

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def save(self, path) -> None:
        fileio.write_fsq(path, self.data, {"combo": self.combo, "window": self.window, "source": self.source,
                                           "label": self.label, "deployment": self.deployment})

    @classmethod
    def load(cls, path) -> "FeatureSequence":
        data, meta = fileio.read_fsq(path)
        return cls(data, meta.get("combo", ""), int(meta.get("window", 0)), meta.get("source", ""),
                   meta.get("label", ""), meta.get("deployment", ""))


# -- windowing -------------------------------------------------------------------------

def window_count(n_samples: int, window: int) -> int:
    """Non-overlapping windows, except 32768-sample spectrogram windows which step 0.68 s."""
    if window == SPEC_WINDOW:
        return 0 if n_samples < SPEC_WINDOW else (n_samples - SPEC_WINDOW) // SPEC_HOP + 1
    return n_samples // window


def frame_windows(x: np.ndarray, window: int) -> np.ndarray:
    """``(n, window)`` view of the analysis windows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = window_count(len(x), window)
    if window == SPEC_WINDOW:
        return sliding_window_view(x, SPEC_WINDOW)[::SPEC_HOP][:n]
    return x[:n * window].reshape(n, window)


# -- spectra ---------------------------------------------------------------------------

def _power_frames(frames: np.ndarray) -> np.ndarray:
    """|FFT|^2 of Hann-windowed 512-sample rows, all 257 bins."""
    return np.abs(np.fft.rfft(frames * _HANN, axis=-1)) ** 2


def _smooth(p: np.ndarray) -> np.ndarray:
    return uniform_filter1d(p, SMOOTH, axis=-1, mode="nearest")


def _band_spectra(windows: np.ndarray) -> np.ndarray:
    """Smoothed in-band power per window, Welch-averaged over 512-frames for longer windows."""
    windows = np.asarray(windows, dtype=np.float64)
    length = windows.shape[-1]
    if length == NFFT:
        p = _power_frames(windows)[..., BAND_LO:BAND_HI + 1]
        return _smooth(p)
    if length % HOP or length < NFFT:
        raise ValueError(f"window length {length} is not a multiple of {HOP} samples")
    frames = sliding_window_view(windows, NFFT, axis=-1)[..., ::HOP, :]
    p = _power_frames(frames)[..., BAND_LO:BAND_HI + 1].mean(axis=-2)
    return _smooth(p)


def spectral_frame(window: np.ndarray) -> SpectralFrame:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (NFFT,):
        raise ValueError(f"spectral_frame needs {NFFT} samples, got {window.shape}")
    return SpectralFrame(_band_spectra(window))


def _s(frame) -> np.ndarray:
    return frame.s if isinstance(frame, SpectralFrame) else np.asarray(frame, dtype=np.float64)


def peak_frequency(frame) -> float:
    s = _s(frame)
    if not np.any(s > 0):
        return 0.0
    return float(FREQS[np.argmax(s)])


def mean_frequency(frame) -> float:
    s = _s(frame)
    total = s.sum()
    return float(s @ FREQS / total) if total > 0 else 0.0


def energy_sum(frame, f1: float, f2: float) -> float:
    s = _s(frame)
    return float(s[(FREQS >= f1) & (FREQS < f2)].sum())


@numba.njit(cache=True)
def _width_bins(s, drop, max_gap):
    out = np.zeros(s.shape[0])
    for r in range(s.shape[0]):
        row = s[r]
        k = np.argmax(row)
        peak = row[k]
        if peak <= 0.0:
            continue
        thr = peak * drop
        hi = k
        gap = 0
        for j in range(k + 1, row.shape[0]):
            if row[j] >= thr:
                hi = j
                gap = 0
            else:
                gap += 1
                if gap > max_gap:
                    break
        lo = k
        gap = 0
        for j in range(k - 1, -1, -1):
            if row[j] >= thr:
                lo = j
                gap = 0
            else:
                gap += 1
                if gap > max_gap:
                    break
        out[r] = hi - lo
    return out


def spectral_width(frame) -> float:
    """Span between the outermost bins within 8 dB of the peak, bridging gaps of at most 3 bins."""
    s = np.atleast_2d(_s(frame))
    return float(_width_bins(s, 10.0 ** (-WIDTH_DROP_DB / 10.0), MAX_GAP)[0] * BIN_HZ)


# -- RMS bands ---------------------------------------------------------------------------

_SOS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _band_sos(f1: int, f2: int) -> np.ndarray | None:
    if (f1, f2) == (1000, 20000):
        return None  # the prepared signal already carries this band
    if (f1, f2) not in _SOS_CACHE:
        _SOS_CACHE[(f1, f2)] = butter_bandpass_sos(f1, f2, 4, RATE)
    return _SOS_CACHE[(f1, f2)]


def rms_band(window: np.ndarray, f1: float, f2: float) -> float | np.ndarray:
    """RMS of the window after a 4-pole Butterworth bandpass started from rest.

    The window mean is removed first: a band-limited signal has none, and
    left in, it would act as a step at the filter input.  Accepts one window
    or a ``(n, len)`` batch.
    """
    x = np.asarray(window, dtype=np.float64)
    x = x - x.mean(axis=-1, keepdims=True)
    sos = _band_sos(int(f1), int(f2))
    y = x if sos is None else sosfilt(sos, x, axis=-1)
    out = np.sqrt(np.mean(y * y, axis=-1))
    return float(out) if out.ndim == 0 else out


# -- handcrafted feature sets --------------------------------------------------------------

RMS_BANDS = {
    "rms_1_20": (1000, 20000), "rms_1_6": (1000, 6000), "rms_6_12": (6000, 12000), "rms_12_20": (12000, 20000),
    "rms_1_2": (1000, 2000), "rms_2_4": (2000, 4000), "rms_4_8": (4000, 8000), "rms_8_16": (8000, 16000),
    "rms_16_20": (16000, 20000),
}
ENERGY_BANDS = {"e_1_4": (1000, 4000), "e_4_8": (4000, 8000), "e_8_16": (8000, 16000)}


def handcrafted_features(window: np.ndarray) -> HandcraftedFeatureSet:
    window = np.asarray(window, dtype=np.float64)
    s = _band_spectra(window)
    zero = not np.any(s > 0)
    return HandcraftedFeatureSet(
        rms={b: rms_band(window, *b) for b in RMS_BANDS.values()},
        pkf=peak_frequency(s), mean_f=mean_frequency(s), width=spectral_width(s),
        energy={b: energy_sum(s, *b) for b in ENERGY_BANDS.values()},
        degenerate=zero)


def combo_matrix(windows: np.ndarray, combo: FeatureCombination) -> np.ndarray:
    """``(m, n)`` features of ``n`` windows given as rows."""
    windows = np.asarray(windows, dtype=np.float64)
    rows = []
    spectra = None
    for name in combo.channels:
        if name in RMS_BANDS:
            rows.append(rms_band(windows, *RMS_BANDS[name]) if len(windows) else np.zeros(0))
            continue
        if spectra is None:
            spectra = _band_spectra(windows) if len(windows) else np.zeros((0, len(FREQS)))
            totals = spectra.sum(axis=1)
            live = totals > 0
        if name == "pkf":
            rows.append(np.where(live, FREQS[np.argmax(spectra, axis=1)], 0.0))
        elif name == "mean_f":
            rows.append(np.divide(spectra @ FREQS, totals, out=np.zeros(len(totals)), where=live))
        elif name == "width":
            rows.append(_width_bins(spectra, 10.0 ** (-WIDTH_DROP_DB / 10.0), MAX_GAP) * BIN_HZ)
        else:
            f1, f2 = ENERGY_BANDS[name]
            rows.append(spectra[:, (FREQS >= f1) & (FREQS < f2)].sum(axis=1))
    return np.vstack(rows)


def extract_sequence(seg, combo: FeatureCombination | str, window: int, source: str = "",
                     label: str = "", deployment: str = "") -> FeatureSequence:
    if isinstance(combo, str):
        combo = FeatureCombination.parse(combo)
    if window not in (512, 2048):
        raise ValueError(f"handcrafted features use 512 or 2048 sample windows, got {window}")
    samples = seg.samples if isinstance(seg, AudioSegment) else seg
    data = combo_matrix(frame_windows(samples, window), combo)
    return FeatureSequence(data.astype(np.float32), combo.value, window, source, label, deployment)


# -- VAE inputs --------------------------------------------------------------------------

def spectral_profile(window: np.ndarray) -> np.ndarray:
    """Smoothed power over bins 11..210, always 200 values; accepts ``(n, 512)`` batches too."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] != NFFT:
        raise ValueError(f"spectral_profile needs {NFFT}-sample windows, got {window.shape}")
    p = _power_frames(window)[..., BAND_LO:BAND_LO + PROFILE_BINS]
    return _smooth(p)


def _log_minmax(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """log10 with a floor 1e-10 below each item's maximum, then min-max to [0, 1]; flat items map to 0."""
    peak = x.max(axis=axes, keepdims=True)
    floor = np.where(peak > 0, peak * 1e-10, 1.0)
    logx = np.log10(np.maximum(x, floor))
    lo = logx.min(axis=axes, keepdims=True)
    span = logx.max(axis=axes, keepdims=True) - lo
    return np.divide(logx - lo, span, out=np.zeros_like(logx), where=span > 0)


def normalised_profiles(windows: np.ndarray) -> np.ndarray:
    """VAE input: per-profile log10 then min-max."""
    return _log_minmax(np.atleast_2d(spectral_profile(windows)), (-1,))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix with half-pixel centres (edge-clamped)."""
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


_FREQ_RESIZE = _resize_matrix(BAND_HI - BAND_LO + 1, SPEC_SIZE)


def spectrogram_power(window: np.ndarray) -> np.ndarray:
    """``(..., 128 time, 203 freq)`` power of a 32768-sample window padded by 256 zeros."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] != SPEC_WINDOW:
        raise ValueError(f"spectrogram needs {SPEC_WINDOW} samples, got {window.shape}")
    pad = [(0, 0)] * (window.ndim - 1) + [(0, HOP)]
    frames = sliding_window_view(np.pad(window, pad), NFFT, axis=-1)[..., ::HOP, :]
    return _power_frames(frames)[..., BAND_LO:BAND_HI + 1]


def spectrogram(window: np.ndarray) -> np.ndarray:
    """128x128 image (time, frequency): bilinear resize of the in-band power, log, per-image min-max."""
    power = spectrogram_power(window)
    # time axis already has 128 frames so bilinear reduces to linear along frequency
    img = power @ _FREQ_RESIZE.T
    return _log_minmax(img, (-2, -1))
