"""Impulsive-noise detection and extraction of the feature-training clip corpus."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import fileio
from .audio import AudioSegment

log = logging.getLogger(__name__)

CLIP_LENGTHS = (512, 2048, 32768)
MERGE_GAP = 96  # 2 ms at 48 kHz


@dataclass(frozen=True)
class DetectorConfig:
    alpha_n1: float = 1e-5   # noise tracker while a detection is open
    alpha_n2: float = 1e-6   # noise tracker otherwise
    alpha_s: float = 1e-2
    threshold_db: float = 6.0
    warmup_samples: int = 256
    merge_gap: int = MERGE_GAP

    def __post_init__(self):
        for name in ("alpha_n1", "alpha_n2", "alpha_s"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.threshold_db <= 0:
            raise ValueError(f"threshold_db must be positive, got {self.threshold_db}")


@dataclass(frozen=True)
class TransientDetection:
    start_idx: int
    end_idx: int
    peak_abs: float
    peak_idx: int


@numba.njit(cache=True)
def _detector_pass(absw, noise0, a_n1, a_n2, a_s, ratio, warmup):
    n = absw.shape[0]
    starts = []
    ends = []
    s_level = absw[0]
    n_level = noise0
    # the signal tracker runs through the warm-up so a loud first sample cannot open a detection
    for i in range(1, warmup):
        s_level = a_s * absw[i] + (1.0 - a_s) * s_level
    detecting = False
    start = 0
    for i in range(warmup, n):
        a_n = a_n1 if detecting else a_n2
        n_level = a_n * absw[i] + (1.0 - a_n) * n_level
        s_level = a_s * absw[i] + (1.0 - a_s) * s_level
        # 20log10(S) - 20log10(N) > thr  <=>  S > 10^(thr/20) * N ; zero levels never trigger
        above = s_level > 0.0 and n_level > 0.0 and s_level > ratio * n_level
        if above:
            if not detecting:
                start = i
            detecting = True
        else:
            if detecting:
                starts.append(start)
                ends.append(i - 1)
            detecting = False
    if detecting:
        starts.append(start)
        ends.append(n - 1)
    out = np.empty((len(starts), 2), dtype=np.int64)
    for j in range(len(starts)):
        out[j, 0] = starts[j]
        out[j, 1] = ends[j]
    return out


def raw_intervals(w: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> np.ndarray:
    """Detector state machine only: ``(k, 2)`` array of inclusive start/end indices."""
    w = np.asarray(w, dtype=np.float64)
    if len(w) <= cfg.warmup_samples:
        raise ValueError(f"signal of {len(w)} samples is not longer than the {cfg.warmup_samples}-sample warm-up")
    absw = np.abs(w)
    ratio = 10.0 ** (cfg.threshold_db / 20.0)
    return _detector_pass(absw, float(np.median(absw)), cfg.alpha_n1, cfg.alpha_n2, cfg.alpha_s,
                          ratio, cfg.warmup_samples)


def merge_intervals(intervals: np.ndarray, gap: int) -> np.ndarray:
    """Join intervals separated by fewer than ``gap`` undetected samples."""
    if len(intervals) == 0 or gap <= 0:
        return intervals
    merged = [list(intervals[0])]
    for start, end in intervals[1:]:
        if start - merged[-1][1] - 1 < gap:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return np.asarray(merged, dtype=np.int64)


def detect_transients(w, cfg: DetectorConfig = DetectorConfig()) -> list[TransientDetection]:
    """Run the impulsive-noise detector over a bandpassed 48 kHz waveform."""
    samples = w.samples if isinstance(w, AudioSegment) else np.asarray(w)
    samples = np.asarray(samples, dtype=np.float64)
    intervals = merge_intervals(raw_intervals(samples, cfg), cfg.merge_gap)
    absw = np.abs(samples)
    out = []
    for start, end in intervals:
        seg = absw[start:end + 1]
        k = int(np.argmax(seg))
        out.append(TransientDetection(int(start), int(end), float(seg[k]), int(start + k)))
    return out


# -- clips ------------------------------------------------------------------------------

class ClipKind(str, enum.Enum):
    TRANSIENT = "Transient"
    RANDOM_NOISE = "RandomNoise"


@dataclass
class Clip:
    samples: np.ndarray
    source_path: str
    source_label: str
    kind: ClipKind
    start_idx: int
    peak_offset: int


def _allowed_starts(n: int, clip_len: int, detections) -> list[tuple[int, int]]:
    """Inclusive ranges of window starts that overlap no detection."""
    last = n - clip_len
    blocked = sorted((max(0, d.start_idx - clip_len + 1), d.end_idx) for d in detections)
    free, cursor = [], 0
    for lo, hi in blocked:
        if lo > cursor:
            free.append((cursor, min(lo - 1, last)))
        cursor = max(cursor, hi + 1)
        if cursor > last:
            break
    if cursor <= last:
        free.append((cursor, last))
    return [(a, b) for a, b in free if a <= b]


def select_clips(w, detections: list[TransientDetection], clip_len: int, max_transients: int = 10,
                 n_random: int = 4, rng_seed: int = 0, source_path: str = "",
                 source_label: str = "") -> list[Clip]:
    """Cut the loudest detections and some detection-free noise into fixed windows.

    Transient windows put the detection peak at a uniformly random offset
    (clamped so the window stays inside the file).  Noise windows start
    uniformly over all positions that overlap no detection interval.
    """
    samples = np.asarray(w.samples if isinstance(w, AudioSegment) else w, dtype=np.float64)
    if clip_len not in CLIP_LENGTHS:
        raise ValueError(f"clip_len must be one of {CLIP_LENGTHS}, got {clip_len}")
    n = len(samples)
    if n < clip_len:
        raise ValueError(f"file of {n} samples is shorter than clip length {clip_len}")
    rng = np.random.default_rng(rng_seed)
    ranked = sorted(detections, key=lambda d: (-d.peak_abs, d.start_idx))[:max_transients]
    clips = []
    for det in ranked:
        offset = int(rng.integers(0, clip_len))
        start = min(max(det.peak_idx - offset, 0), n - clip_len)
        clips.append(Clip(samples[start:start + clip_len].copy(), source_path, source_label,
                          ClipKind.TRANSIENT, start, det.peak_idx - start))

    free = _allowed_starts(n, clip_len, detections)
    total = sum(b - a + 1 for a, b in free)
    if n_random and total == 0:
        log.warning("%s: no detection-free span of %d samples; no noise clips", source_path, clip_len)
    for _ in range(n_random if total else 0):
        pick = int(rng.integers(0, total))
        for a, b in free:
            span = b - a + 1
            if pick < span:
                start = a + pick
                break
            pick -= span
        window = samples[start:start + clip_len].copy()
        clips.append(Clip(window, source_path, source_label, ClipKind.RANDOM_NOISE, start,
                          int(np.argmax(np.abs(window)))))
    return clips


# -- persistence -------------------------------------------------------------------------

INDEX_FIELDS = ["clip_id", "source_path", "source_label", "kind", "start_idx"]


def write_clip_corpus(directory, clips: list[Clip], clip_len: int, sample_rate: int = 48_000) -> None:
    """``clips_<len>.cks`` (all windows back to back) plus ``clips_<len>.csv`` index."""
    directory = Path(directory)
    data = np.concatenate([c.samples for c in clips]) if clips else np.zeros(0)
    fileio.write_segment(directory / f"clips_{clip_len}.cks", data, sample_rate)
    with fileio.atomic_path(directory / f"clips_{clip_len}.csv") as tmp:
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(INDEX_FIELDS)
            for i, c in enumerate(clips):
                writer.writerow([i, c.source_path, c.source_label, c.kind.value, c.start_idx])


def read_clip_corpus(directory, clip_len: int) -> list[Clip]:
    directory = Path(directory)
    data, _ = fileio.read_segment(directory / f"clips_{clip_len}.cks")
    with open(directory / f"clips_{clip_len}.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(data) != len(rows) * clip_len:
        raise fileio.FormatError(f"clip corpus holds {len(data)} samples for {len(rows)} clips of {clip_len}")
    clips = []
    for i, row in enumerate(rows):
        window = data[i * clip_len:(i + 1) * clip_len].astype(np.float64)
        clips.append(Clip(window, row["source_path"], row["source_label"], ClipKind(row["kind"]),
                          int(row["start_idx"]), int(np.argmax(np.abs(window)))))
    return clips
