"""Stage implementations behind the command-line front end.

Every stage reads and writes files only, keyed by the manifest's relative
recording paths, so stages can be rerun independently:

    <prepared>/<path>.cks          band-passed 48 kHz segment
    <detections>/<path>.det.csv    detector intervals
    <clips>/clips_<len>.cks/.csv   clip corpus
    <sequences>/<path>.fsq(.json)  per-recording feature sequence
    <sequences>/clip_features.fsq  clip-corpus feature values for the standardiser
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from functools import partial
from pathlib import Path

import numpy as np

from . import audio, dataset, features, fileio, synth, tcn, transient, vae
from .dataset import DatasetManifest, DurationClass, Label, RecordingEntry
from .evaluate import (EvalReport, Prediction, compare_models, evaluate, read_predictions, reports_from_csv,
                       write_predictions)
from .features import FeatureCombination, FeatureSequence
from .parallel import map_jobs

log = logging.getLogger(__name__)

CLIP_FEATURES = "clip_features.fsq"
DETECTION_FIELDS = ["start_idx", "end_idx", "peak_abs", "peak_idx"]


class ConfigError(ValueError):
    """Bad configuration value or key (exit code 2)."""


class DataError(ValueError):
    """Missing or inconsistent input data (exit code 3)."""


# -- configuration ----------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    bandpass_low_hz: float = 1000.0
    bandpass_high_hz: float = 20000.0
    bandpass_poles: int = 6
    detector_threshold_db: float = 6.0
    detector_alpha_n1: float = 1e-5
    detector_alpha_n2: float = 1e-6
    detector_alpha_s: float = 1e-2
    detector_warmup: int = 256
    clip_lengths: str = "512,2048"
    clip_max_transients: int = 10
    clip_random: int = 4
    vae_kind: str = "Waveform2048"
    vae_latent: int = 8
    vae_epochs: int = 50
    vae_batch_size: int = 64
    vae_lr: float = 1e-3
    vae_beta: float = 1.0
    combo: str = "Rms5"
    window: int = 2048
    tcn_epochs: int = 100
    tcn_patience: int = 15
    tcn_batch_size: int = 8
    tcn_lr: float = 1e-3
    tcn_readout: str = "mean"
    tcn_val_fraction: float = 0.2
    tcn_train_crop: int = 0
    holdout_fraction: float = 0.25
    synth_n_pos: int = 50
    synth_n_neg: int = 50
    synth_duration: str = "FourMinute"

    @classmethod
    def parse(cls, text: str, source: str = "pipeline.cfg") -> "PipelineConfig":
        """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                values[key] = conv(value)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: {key} needs a {types[key]}, got {value!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: Path | None) -> "PipelineConfig":
        """Read ``path`` (or ``./pipeline.cfg`` if present); the seed falls back to ``CKT_SEED``."""
        explicit = path is not None
        path = Path(path) if explicit else Path("pipeline.cfg")
        if path.exists():
            cfg = cls.parse(path.read_text(), str(path))
            seed_set = any(ln.split("#", 1)[0].split("=", 1)[0].strip() == "seed"
                           for ln in path.read_text().splitlines())
        elif explicit:
            raise DataError(f"config file {path} does not exist")
        else:
            cfg, seed_set = cls(), False
        env = os.environ.get("CKT_SEED")
        if env is not None and not seed_set:
            try:
                cfg.seed = int(env)
            except ValueError:
                raise ConfigError(f"CKT_SEED must be an integer, got {env!r}") from None
        return cfg

    def bandpass(self) -> audio.BandpassSpec:
        return audio.BandpassSpec(self.bandpass_low_hz, self.bandpass_high_hz, self.bandpass_poles)

    def detector(self) -> transient.DetectorConfig:
        return transient.DetectorConfig(self.detector_alpha_n1, self.detector_alpha_n2, self.detector_alpha_s,
                                        self.detector_threshold_db, self.detector_warmup)

    def tcn(self) -> tcn.TcnConfig:
        return tcn.TcnConfig(batch_size=self.tcn_batch_size, lr=self.tcn_lr, readout=self.tcn_readout,
                             epochs=self.tcn_epochs, patience=self.tcn_patience, train_crop=self.tcn_train_crop)


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit sub-seed for a stage and item, independent of processing order."""
    h = hashlib.sha256("\x00".join(str(p) for p in (seed,) + parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# -- helpers ----------------------------------------------------------------------------------

def _rel(entry: RecordingEntry) -> Path:
    p = Path(entry.path)
    return Path(*p.parts[1:]) if p.is_absolute() else p


def _out(directory, entry: RecordingEntry, suffix: str) -> Path:
    rel = _rel(entry)
    return Path(directory) / rel.with_name(rel.name + suffix)


def _active(manifest: DatasetManifest) -> list[RecordingEntry]:
    return [e for e in manifest.entries if e.label is not Label.EXCLUDED]


def _require(paths: list[Path], what: str) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        shown = ", ".join(missing[:20]) + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else "")
        raise DataError(f"missing {what}: {shown}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    return DatasetManifest.load(path)


# -- synth / split ----------------------------------------------------------------------------

def run_synth(out_dir, n_pos: int, n_neg: int, duration: str, seed: int, jobs: int = 1) -> DatasetManifest:
    return synth.gen_corpus(n_pos, n_neg, DurationClass(duration), seed, out_dir, jobs=jobs)


def run_split(manifest_path, fraction: float, seed: int, train_name="train.csv", test_name="test.csv"):
    """Balanced, stratified split written next to the manifest so relative paths still resolve."""
    man = load_manifest(manifest_path)
    a, b = dataset.split(dataset.balance(man, seed), fraction, seed)
    parent = Path(manifest_path).parent
    a.save(parent / train_name)
    b.save(parent / test_name)
    return a, b


# -- prepare / detect / clips -----------------------------------------------------------------

def _prepare_one(entry: RecordingEntry, root: Path | None, out_dir: Path, spec: audio.BandpassSpec) -> None:
    src = Path(entry.path) if root is None or Path(entry.path).is_absolute() else root / entry.path
    try:
        seg = audio.prepare_file(src, spec)
    except (ValueError, OSError) as e:
        raise DataError(f"cannot prepare {src}: {e}") from e
    audio.write_segment(_out(out_dir, entry, ".cks"), seg)


def run_prepare(manifest_path, out_dir, cfg: PipelineConfig) -> int:
    man = load_manifest(manifest_path)
    entries = _active(man)
    _require([man.resolve(e) for e in entries], "recordings")
    map_jobs(partial(_prepare_one, root=man.root, out_dir=Path(out_dir), spec=cfg.bandpass()), entries, cfg.jobs)
    return len(entries)


def write_detections(path, dets: list[transient.TransientDetection]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETECTION_FIELDS)
    for d in dets:
        w.writerow([d.start_idx, d.end_idx, repr(d.peak_abs), d.peak_idx])
    fileio.write_text_atomic(path, buf.getvalue())


def read_detections(path) -> list[transient.TransientDetection]:
    with open(path, newline="") as fh:
        return [transient.TransientDetection(int(r["start_idx"]), int(r["end_idx"]), float(r["peak_abs"]),
                                             int(r["peak_idx"])) for r in csv.DictReader(fh)]


def _detect_one(entry, prepared: Path, out_dir: Path, det_cfg) -> int:
    seg = audio.read_segment(_out(prepared, entry, ".cks"))
    dets = transient.detect_transients(seg, det_cfg)
    write_detections(_out(out_dir, entry, ".det.csv"), dets)
    return len(dets)


def run_detect(manifest_path, prepared, out_dir, cfg: PipelineConfig) -> int:
    entries = _active(load_manifest(manifest_path))
    _require([_out(prepared, e, ".cks") for e in entries], "prepared segments")
    counts = map_jobs(partial(_detect_one, prepared=Path(prepared), out_dir=Path(out_dir), det_cfg=cfg.detector()),
                      entries, cfg.jobs)
    return int(sum(counts))


def _clips_one(entry, prepared: Path, detections: Path, lengths, cfg: PipelineConfig):
    samples = audio.read_segment(_out(prepared, entry, ".cks")).samples
    dets = read_detections(_out(detections, entry, ".det.csv"))
    return {n: transient.select_clips(samples, dets, n, cfg.clip_max_transients, cfg.clip_random,
                                      derive_seed(cfg.seed, "clips", n, entry.path), entry.path,
                                      entry.label.value) for n in lengths}


def run_clips(manifest_path, prepared, detections, out_dir, lengths: list[int], cfg: PipelineConfig) -> dict:
    entries = _active(load_manifest(manifest_path))
    _require([_out(prepared, e, ".cks") for e in entries], "prepared segments")
    _require([_out(detections, e, ".det.csv") for e in entries], "detection files")
    per_file = map_jobs(partial(_clips_one, prepared=Path(prepared), detections=Path(detections),
                                lengths=tuple(lengths), cfg=cfg), entries, cfg.jobs)
    sizes = {}
    for n in lengths:
        clips = [c for f in per_file for c in f[n]]
        transient.write_clip_corpus(out_dir, clips, n)
        sizes[n] = len(clips)
    return sizes


def _clip_windows(clips_dir, length: int) -> np.ndarray:
    _require([Path(clips_dir) / f"clips_{length}.cks", Path(clips_dir) / f"clips_{length}.csv"],
             f"clip corpus of length {length}")
    clips = transient.read_clip_corpus(clips_dir, length)
    if not clips:
        raise DataError(f"clip corpus of length {length} in {clips_dir} is empty")
    return np.stack([c.samples for c in clips])


# -- VAE ---------------------------------------------------------------------------------------

def run_train_vae(clips_dir, out, kind: str, latent: int, cfg: PipelineConfig, epochs: int | None = None,
                  progress=None) -> vae.VaeTrainResult:
    kind = vae.InputKind(kind)
    vcfg = vae.VaeConfig(kind, latent, epochs=cfg.vae_epochs, batch_size=cfg.vae_batch_size, lr=cfg.vae_lr,
                         beta=cfg.vae_beta)
    windows = _clip_windows(clips_dir, kind.window)
    scale = vae.waveform_scale(windows) if kind.is_waveform else 1.0
    inputs = vae.prepare_inputs(kind, windows, scale)
    result = vae.train_vae(inputs, vcfg, epochs, derive_seed(cfg.seed, "train-vae"), scale, progress)
    vae.save_vae(out, result.model)
    fileio.write_json_atomic(Path(out).with_suffix(".trace.json"), result.trace)
    return result


_MODEL_CACHE: dict[str, vae.VaeModel] = {}


def _cached_vae(path: str) -> vae.VaeModel:
    if path not in _MODEL_CACHE:
        _MODEL_CACHE[path] = vae.load_vae(path)
    return _MODEL_CACHE[path]


def _embed_one(entry, prepared: Path, out_dir: Path, model_path: str) -> None:
    model = _cached_vae(model_path)
    seg = audio.read_segment(_out(prepared, entry, ".cks"))
    seq = vae.embed_recording(model, seg.samples, entry.path, entry.label.value, entry.deployment)
    seq.save(_out(out_dir, entry, ".fsq"))


def run_embed(manifest_path, prepared, model_path, out_dir, cfg: PipelineConfig, clips_dir=None) -> int:
    entries = _active(load_manifest(manifest_path))
    _require([_out(prepared, e, ".cks") for e in entries], "prepared segments")
    _require([Path(model_path).with_suffix(".json"), Path(model_path).with_suffix(".mdl")], "VAE checkpoint")
    model = vae.load_vae(model_path)
    if clips_dir is not None:
        kind = model.config.input_kind
        windows = _clip_windows(clips_dir, kind.window)
        values = model.embed(vae.prepare_inputs(kind, windows, model.input_scale)).T
        FeatureSequence(values, vae.combo_name(model.config), kind.window, str(clips_dir)).save(
            Path(out_dir) / CLIP_FEATURES)
    map_jobs(partial(_embed_one, prepared=Path(prepared), out_dir=Path(out_dir), model_path=str(model_path)),
             entries, cfg.jobs)
    return len(entries)


# -- handcrafted features -------------------------------------------------------------------

def _features_one(entry, prepared: Path, out_dir: Path, combo: str, window: int) -> None:
    seg = audio.read_segment(_out(prepared, entry, ".cks"))
    seq = features.extract_sequence(seg, combo, window, entry.path, entry.label.value, entry.deployment)
    seq.save(_out(out_dir, entry, ".fsq"))


def run_features(manifest_path, prepared, out_dir, combo: str, window: int, cfg: PipelineConfig,
                 clips_dir=None) -> int:
    combo_e = FeatureCombination.parse(combo)
    entries = _active(load_manifest(manifest_path))
    _require([_out(prepared, e, ".cks") for e in entries], "prepared segments")
    if clips_dir is not None:
        values = features.combo_matrix(_clip_windows(clips_dir, window), combo_e)
        FeatureSequence(values.astype(np.float32), combo_e.value, window, str(clips_dir)).save(
            Path(out_dir) / CLIP_FEATURES)
    map_jobs(partial(_features_one, prepared=Path(prepared), out_dir=Path(out_dir), combo=combo_e.value,
                     window=window), entries, cfg.jobs)
    return len(entries)


# -- TCN ---------------------------------------------------------------------------------------

def _load_sequences(entries, seq_dir) -> list[FeatureSequence]:
    _require([_out(seq_dir, e, ".fsq") for e in entries], "feature sequences")
    seqs = [FeatureSequence.load(_out(seq_dir, e, ".fsq")) for e in entries]
    kinds = {(s.combo, s.window, s.m) for s in seqs}
    if len(kinds) > 1:
        raise DataError(f"sequences in {seq_dir} mix combos/windows/widths: {sorted(kinds)}")
    return seqs


def _labels(entries) -> list[int]:
    return [1 if e.label is Label.POSITIVE else 0 for e in entries]


def run_train_tcn(manifest_path, seq_dir, out, cfg: PipelineConfig, epochs: int | None = None,
                  progress=None) -> tcn.TrainResult:
    """Train on the manifest, holding out ``tcn_val_fraction`` for checkpoint selection."""
    man = load_manifest(manifest_path)
    _require([Path(seq_dir) / CLIP_FEATURES], "clip-corpus feature values (run features/embed with --clips)")
    train_m, val_m = dataset.split(dataset.balance(man, cfg.seed), 1.0 - cfg.tcn_val_fraction, cfg.seed)
    tr_e, va_e = _active(train_m), _active(val_m)
    tr_s, va_s = _load_sequences(tr_e, seq_dir), _load_sequences(va_e, seq_dir)
    clip_seq = FeatureSequence.load(Path(seq_dir) / CLIP_FEATURES)
    names = (list(FeatureCombination.parse(clip_seq.combo).channels)
             if not clip_seq.combo.startswith("vae-") else None)
    std = tcn.Standardiser.fit(clip_seq.data, names)
    if tr_s and tr_s[0].m != clip_seq.m:
        raise DataError(f"sequences have {tr_s[0].m} channels, clip features {clip_seq.m}")
    model = tcn.TcnModel(clip_seq.m, cfg.tcn(), seed=derive_seed(cfg.seed, "tcn-init"))
    result = tcn.train(model, [std.apply(s.data) for s in tr_s], _labels(tr_e),
                       [std.apply(s.data) for s in va_s], _labels(va_e), epochs,
                       derive_seed(cfg.seed, "tcn-train"), progress)
    tcn.save_tcn(out, model, {"standardiser": std.to_json(), "combo": clip_seq.combo, "window": clip_seq.window,
                              "best_epoch": result.best_epoch})
    fileio.write_json_atomic(Path(out).with_suffix(".trace.json"), [asdict(r) for r in result.trace])
    return result


def run_predict(manifest_path, seq_dir, model_path, out_csv, cfg: PipelineConfig) -> list[Prediction]:
    entries = _active(load_manifest(manifest_path))
    _require([Path(model_path).with_suffix(".json"), Path(model_path).with_suffix(".mdl")], "TCN checkpoint")
    model, arch = tcn.load_tcn(model_path)
    std = tcn.Standardiser.from_json(arch["standardiser"])
    seqs = _load_sequences(entries, seq_dir)
    if seqs and (seqs[0].combo, seqs[0].window) != (arch["combo"], arch["window"]):
        raise DataError(f"model expects {arch['combo']}/{arch['window']}, sequences are "
                        f"{seqs[0].combo}/{seqs[0].window}")
    lp = tcn.predict_log_probs(model, [std.apply(s.data) for s in seqs], cfg.tcn_batch_size)
    preds = [Prediction(e.path, e.deployment, e.label.value, int(row.argmax()), float(row[0]), float(row[1]))
             for e, row in zip(entries, lp)]
    write_predictions(out_csv, preds)
    fileio.write_json_atomic(_sidecar(out_csv), {"model_id": Path(model_path).name, "combo": arch["combo"],
                                                 "window": arch["window"]})
    return preds


def _sidecar(predictions_csv) -> Path:
    p = Path(predictions_csv)
    return p.with_name(p.name + ".json")


def run_evaluate(manifest_path, predictions_csv, out_csv, model_id: str = "") -> EvalReport:
    man = load_manifest(manifest_path)
    if not Path(predictions_csv).exists():
        raise DataError(f"predictions file {predictions_csv} does not exist")
    preds = read_predictions(predictions_csv)
    side = _sidecar(predictions_csv)
    meta = json.loads(side.read_text()) if side.exists() else {}
    report = evaluate(preds, man, model_id or meta.get("model_id", Path(predictions_csv).stem),
                      meta.get("combo", ""), int(meta.get("window", 0)))
    report.save(out_csv)
    return report


def run_compare(report_paths, out_dir) -> dict:
    _require([Path(p) for p in report_paths], "report files")
    reports = [r for p in report_paths for r in reports_from_csv(Path(p).read_text())]
    return compare_models(reports, out_dir)
