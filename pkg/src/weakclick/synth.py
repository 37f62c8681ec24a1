"""Synthetic click-train recordings with ground truth, for desk-scale experiments.

A corpus is a list of ``CorpusItem`` plans; each plan is rendered on demand
from its own seed, so any single file can be regenerated without the rest.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy.signal import sosfilt

from . import audio, fileio
from .audio import AudioSegment, butter_bandpass_sos
from .dataset import DatasetManifest, DurationClass, Label, RecordingEntry
from .parallel import map_jobs

RATE = 48_000


class DistractorKind(str, enum.Enum):
    SHIP_BAND = "ShipBand"
    SNAPPING_BURST = "SnappingBurst"
    OTHER_ODONTOCETE = "OtherOdontocete"


@dataclass
class Distractor:
    kind: DistractorKind
    params: dict = field(default_factory=dict)


@dataclass
class SynthSpec:
    duration_s: float = 240.0
    sample_rate: int = RATE
    ici_mean_s: float = 0.5
    ici_jitter: float = 0.1  # std of the ICI as a fraction of its mean
    click_len_ms: float = 1.0
    click_amp: float = 0.2
    click_amp_jitter: float = 0.0  # each click scaled by U(1 - jitter, 1)
    click_fc_hz: float = 9000.0
    n_whales: int = 1
    noise_sigma: float = 0.01
    distractors: list[Distractor] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.ici_mean_s <= self.click_len_ms / 1000.0:
            raise ValueError("mean inter-click interval must exceed the click duration")
        if not 0.0 <= self.click_amp <= 1.0:
            raise ValueError(f"click_amp must lie in [0, 1], got {self.click_amp}")
        if not 0.0 <= self.click_amp_jitter < 1.0:
            raise ValueError(f"click_amp_jitter must lie in [0, 1), got {self.click_amp_jitter}")
        if self.n_whales < 0 or self.noise_sigma < 0:
            raise ValueError("n_whales and noise_sigma must be non-negative")


@dataclass
class SynthRecording:
    segment: AudioSegment
    label: Label
    click_times: np.ndarray  # sample index of each click onset


# -- sources -----------------------------------------------------------------------------

def gen_click(spec: SynthSpec) -> np.ndarray:
    """Fourth-order gammatone burst; peak |value| equals ``click_amp``."""
    n = int(round(spec.click_len_ms * spec.sample_rate / 1000.0))
    t = np.arange(n) / spec.sample_rate
    bandwidth = 0.2 * spec.click_fc_hz  # rings for most of the 1 ms, still several kHz wide
    g = t ** 3 * np.exp(-2 * np.pi * bandwidth * t) * np.cos(2 * np.pi * spec.click_fc_hz * t)
    peak = np.abs(g).max()
    return g * (spec.click_amp / peak) if peak > 0 else g


def _train_times(rng, n_samples, rate, ici_mean, jitter, min_ici) -> np.ndarray:
    times = []
    t = rng.uniform(0, ici_mean)
    while t * rate < n_samples:
        times.append(int(t * rate))
        t += max(rng.normal(ici_mean, jitter * ici_mean), min_ici)
    return np.asarray(times, dtype=np.int64)


def _add_at(x, idx, burst):
    end = min(idx + len(burst), len(x))
    x[idx:end] += burst[:end - idx]


def _ship_band(rng, n, rate, sigma, p):
    level = p.get("level", 1.5) * sigma
    sos = butter_bandpass_sos(p.get("low_hz", 1000.0), p.get("high_hz", 3000.0), 4, rate)
    band = sosfilt(sos, rng.standard_normal(n))
    band *= level / (band.std() + 1e-30)
    t = np.arange(n) / rate
    am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
    return band * am


def _snapping(rng, n, rate, sigma, p):
    out = np.zeros(n)
    rate_hz = p.get("rate_hz", 2.0)
    count = rng.poisson(rate_hz * n / rate)
    lo, hi = p.get("snr_range", (10.0, 40.0))
    length = int(p.get("len_ms", 0.3) * rate / 1000)
    env = np.exp(-np.arange(length) / max(length / 4, 1))
    for idx in rng.integers(0, n, size=count):
        burst = rng.standard_normal(length) * env
        burst *= min(sigma * rng.uniform(lo, hi), 0.9) / np.abs(burst).max()
        _add_at(out, int(idx), burst)
    return out


def _other_odontocete(rng, n, rate, sigma, p):
    out = np.zeros(n)
    ici = p.get("ici_s", 0.1)
    fc = rng.uniform(*p.get("fc_range", (15_000.0, 18_000.0)))
    amp = min(sigma * rng.uniform(*p.get("snr_range", (10.0, 40.0))), 0.9)
    bout_s = p.get("bout_s", 20.0)
    spec = SynthSpec(click_len_ms=p.get("click_len_ms", 0.3), click_amp=amp, click_fc_hz=fc, ici_mean_s=ici)
    click = gen_click(spec)
    # echolocation bouts separated by silences of similar length
    t = rng.uniform(0, bout_s)
    while t * rate < n:
        start, stop = int(t * rate), int(min((t + bout_s) * rate, n))
        for idx in _train_times(rng, stop - start, rate, ici, 0.15, 0.02):
            _add_at(out, start + int(idx), click * rng.uniform(0.6, 1.0))
        t += bout_s * rng.uniform(1.5, 3.0)
    return out


_DISTRACTORS = {
    DistractorKind.SHIP_BAND: _ship_band,
    DistractorKind.SNAPPING_BURST: _snapping,
    DistractorKind.OTHER_ODONTOCETE: _other_odontocete,
}


def gen_recording(spec: SynthSpec) -> SynthRecording:
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_s * spec.sample_rate))
    x = rng.standard_normal(n) * spec.noise_sigma
    click = gen_click(spec)
    all_times = []
    for _ in range(spec.n_whales):
        times = _train_times(rng, n - len(click), spec.sample_rate, spec.ici_mean_s, spec.ici_jitter,
                             2 * len(click) / spec.sample_rate)
        for idx in times:
            _add_at(x, int(idx), click * rng.uniform(1.0 - spec.click_amp_jitter, 1.0))
        all_times.append(times)
    for d in spec.distractors:
        x += _DISTRACTORS[DistractorKind(d.kind)](rng, n, spec.sample_rate, spec.noise_sigma, d.params)
    np.clip(x, -1.0, 1.0, out=x)
    times = np.sort(np.concatenate(all_times)) if all_times else np.zeros(0, dtype=np.int64)
    label = Label.POSITIVE if spec.n_whales >= 1 else Label.NEGATIVE
    return SynthRecording(AudioSegment(x, spec.sample_rate), label, times)


# -- corpora -----------------------------------------------------------------------------

@dataclass(frozen=True)
class DeploymentProfile:
    name: str
    noise_sigma: float
    distractor_mix: tuple[DistractorKind, ...]


DEPLOYMENTS = (
    DeploymentProfile("SYN_1", 0.005, (DistractorKind.SNAPPING_BURST,)),
    DeploymentProfile("SYN_2", 0.02, (DistractorKind.SHIP_BAND, DistractorKind.SNAPPING_BURST)),
    DeploymentProfile("SYN_3", 0.05, (DistractorKind.OTHER_ODONTOCETE, DistractorKind.SHIP_BAND)),
)


@dataclass
class CorpusConfig:
    click_snr_range: tuple[float, float] = (10.0, 40.0)  # click peak / noise sigma
    click_amp_jitter: float = 0.3
    distractor_prob: float = 0.6  # chance that a file carries its deployment's distractors
    deployments: tuple[DeploymentProfile, ...] = DEPLOYMENTS


@dataclass
class CorpusItem:
    entry: RecordingEntry
    spec: SynthSpec


def corpus_plan(n_pos: int, n_neg: int, duration_class: DurationClass, seed: int,
                config: CorpusConfig = CorpusConfig()) -> list[CorpusItem]:
    """Deterministic per-file specifications, deployments assigned round robin within each class."""
    items = []
    prefix = "4min" if duration_class is DurationClass.FOUR_MINUTE else "30s"
    labels = [Label.POSITIVE] * n_pos + [Label.NEGATIVE] * n_neg
    counters = {Label.POSITIVE: 0, Label.NEGATIVE: 0}
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        dep = config.deployments[counters[label] % len(config.deployments)]
        counters[label] += 1
        distractors = []
        if rng.uniform() < config.distractor_prob:
            distractors = [Distractor(k) for k in dep.distractor_mix]
        snr = rng.uniform(*config.click_snr_range)
        spec = SynthSpec(duration_s=duration_class.seconds, noise_sigma=dep.noise_sigma,
                         click_amp=min(dep.noise_sigma * snr, 0.9), click_amp_jitter=config.click_amp_jitter,
                         n_whales=1 if label is Label.POSITIVE else 0,
                         ici_mean_s=float(rng.uniform(0.45, 0.6)),
                         distractors=distractors, seed=int(rng.integers(2 ** 63)))
        tags = frozenset(d.kind.value for d in distractors)
        path = f"{prefix}_{i:04d}_{'pos' if label is Label.POSITIVE else 'neg'}.wav"
        items.append(CorpusItem(RecordingEntry(path, dep.name, label, tags, duration_class), spec))
    return items


def _spec_json(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["distractors"] = [{"kind": DistractorKind(x.kind).value, "params": x.params} for x in spec.distractors]
    return d


def render_item(item: CorpusItem, out_dir) -> None:
    """Write one planned file and its ``<wav>.json`` ground-truth sidecar."""
    out_dir = Path(out_dir)
    rec = gen_recording(item.spec)
    audio.write_wav(out_dir / item.entry.path, rec.segment)
    fileio.write_json_atomic(out_dir / (item.entry.path + ".json"), {
        "label": rec.label.value, "click_times": rec.click_times.tolist(), "spec": _spec_json(item.spec)})


def gen_corpus(n_pos: int, n_neg: int, duration_class: DurationClass, seed: int, out_dir,
               config: CorpusConfig = CorpusConfig(), jobs: int = 1) -> DatasetManifest:
    """Write WAV files, click-time sidecars and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = corpus_plan(n_pos, n_neg, duration_class, seed, config)
    map_jobs(partial(render_item, out_dir=out_dir), items, jobs)
    manifest = DatasetManifest([it.entry for it in items], seed=seed, root=out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest


def load_click_times(wav_path) -> np.ndarray:
    meta = json.loads(Path(str(wav_path) + ".json").read_text())
    return np.asarray(meta["click_times"], dtype=np.int64)
