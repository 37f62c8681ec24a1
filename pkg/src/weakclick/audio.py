"""Recording standardisation: first channel, DC removal, 48 kHz, 1-20 kHz bandpass."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly, sosfilt

from . import fileio

TARGET_RATE = 48_000


class AudioFormatError(ValueError):
    """Unreadable, empty or unsupported audio input."""


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if np.asarray(self.samples).ndim != 1 or len(self.samples) == 0:
            raise ValueError("AudioSegment needs a non-empty 1-D sample vector")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class BandpassSpec:
    low_hz: float = 1000.0
    high_hz: float = 20000.0
    poles: int = 6

    def check(self, sample_rate: float) -> None:
        if not 0 < self.low_hz < self.high_hz < sample_rate / 2:
            raise ValueError(f"band {self.low_hz}-{self.high_hz} Hz invalid at {sample_rate} Hz")
        if self.poles <= 0 or self.poles % 2:
            raise ValueError(f"a Butterworth bandpass needs an even pole count, got {self.poles}")


# -- filter design --------------------------------------------------------------

def butter_bandpass_sos(low_hz: float, high_hz: float, poles: int, sample_rate: float) -> np.ndarray:
    """Digital Butterworth bandpass as ``poles // 2`` second-order sections.

    Analog low-pass prototype of order ``poles // 2``, low-pass to bandpass
    substitution at pre-warped edges, then the bilinear transform.  Each
    section carries one zero at z=1 and one at z=-1; the overall gain sits in
    the first section.  Rows are ``[b0, b1, b2, 1, a1, a2]``.
    """
    BandpassSpec(low_hz, high_hz, poles).check(sample_rate)
    order = poles // 2
    fs2 = 2.0 * sample_rate
    w_lo = fs2 * math.tan(math.pi * low_hz / sample_rate)
    w_hi = fs2 * math.tan(math.pi * high_hz / sample_rate)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    half = proto * bw / 2.0
    root = np.sqrt(half * half - w0_sq + 0j)
    analog = np.concatenate([half + root, half - root])

    digital = (fs2 + analog) / (fs2 - analog)
    # H(s) = bw^N s^N / prod(s - p); bilinear maps the N zeros at s=0 to z=1
    # and the N zeros at infinity to z=-1.
    gain = np.real(bw ** order * fs2 ** order / np.prod(fs2 - analog))

    pairs = _pair_poles(digital)
    sos = np.zeros((order, 6))
    for i, (p1, p2) in enumerate(pairs):
        sos[i, :3] = [1.0, 0.0, -1.0]
        sos[i, 3:] = np.real([1.0, -(p1 + p2), p1 * p2])
    sos[0, :3] *= gain
    return sos


def _pair_poles(poles: np.ndarray) -> list[tuple[complex, complex]]:
    """Group poles into conjugate pairs, real poles paired with each other."""
    tol = 1e-9 * max(1.0, np.abs(poles).max())
    complex_up = sorted((p for p in poles if p.imag > tol), key=lambda p: -abs(p))
    reals = sorted((p.real for p in poles if abs(p.imag) <= tol), key=lambda r: -abs(r))
    pairs = [(p, np.conj(p)) for p in complex_up]
    if len(reals) % 2:
        raise ValueError("odd number of real poles cannot fill second-order sections")
    pairs += [(complex(reals[i]), complex(reals[i + 1])) for i in range(0, len(reals), 2)]
    return pairs


def kaiser_sinc_lowpass(cutoff: float, num_taps: int, beta: float = 8.0) -> np.ndarray:
    """Windowed-sinc low-pass with unit DC gain; ``cutoff`` in cycles/sample."""
    n = np.arange(num_taps) - (num_taps - 1) / 2.0
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * n) * np.kaiser(num_taps, beta)
    return h / h.sum()


# -- operations -------------------------------------------------------------------

def load_first_channel(path) -> AudioSegment:
    """Channel 0 of a PCM WAV (16/24/32-bit integer or 32-bit float) as floats in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        raise AudioFormatError(f"{path}: cannot read WAV ({exc})") from exc
    if data.ndim == 2:
        data = data[:, 0]
    if data.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return AudioSegment(samples, int(rate))


def write_wav(path, seg: AudioSegment) -> None:
    with fileio.atomic_path(path) as tmp:
        wavfile.write(tmp, seg.sample_rate, np.asarray(seg.samples, dtype=np.float32))


def remove_dc(seg: AudioSegment) -> AudioSegment:
    x = np.asarray(seg.samples, dtype=np.float64)
    return AudioSegment(x - x.mean(), seg.sample_rate)


def resample_to_48k(seg: AudioSegment, taps_per_phase: int = 64, beta: float = 8.0) -> AudioSegment:
    """Rational polyphase resampling to 48 kHz.

    The anti-alias filter is a Kaiser windowed sinc with ``taps_per_phase * up + 1``
    taps and its cutoff at 0.45 of the 48 kHz output rate (21.6 kHz).
    """
    rate = seg.sample_rate
    if rate < TARGET_RATE:
        raise ValueError(f"input rate {rate} Hz is below {TARGET_RATE} Hz; upsampling is not supported")
    x = np.asarray(seg.samples, dtype=np.float64)
    if rate == TARGET_RATE:
        return AudioSegment(x, rate)
    ratio = Fraction(TARGET_RATE, rate)
    up, down = ratio.numerator, ratio.denominator
    cutoff = 0.45 * TARGET_RATE / (rate * up)
    h = kaiser_sinc_lowpass(cutoff, taps_per_phase * up + 1, beta)
    y = resample_poly(x, up, down, window=h)
    n_out = int(round(len(x) * TARGET_RATE / rate))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioSegment(y[:n_out], TARGET_RATE)


def bandpass(seg: AudioSegment, spec: BandpassSpec = BandpassSpec()) -> AudioSegment:
    """Single forward pass through the cascaded Butterworth sections."""
    sos = butter_bandpass_sos(spec.low_hz, spec.high_hz, spec.poles, seg.sample_rate)
    return AudioSegment(sosfilt(sos, np.asarray(seg.samples, dtype=np.float64)), seg.sample_rate)


def prepare(seg: AudioSegment, spec: BandpassSpec = BandpassSpec()) -> AudioSegment:
    """DC removal, decimation to 48 kHz, then the 1-20 kHz bandpass."""
    return bandpass(resample_to_48k(remove_dc(seg)), spec)


def prepare_file(path, spec: BandpassSpec = BandpassSpec()) -> AudioSegment:
    return prepare(load_first_channel(path), spec)


def write_segment(path, seg: AudioSegment) -> None:
    fileio.write_segment(path, seg.samples, seg.sample_rate)


def read_segment(path) -> AudioSegment:
    samples, rate = fileio.read_segment(path)
    return AudioSegment(samples.astype(np.float64), rate)
