"""Weakly-labelled recording manifests: CSV I/O, class balancing and train/validation splits."""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ["path", "deployment", "label", "other_sources", "duration_class"]


class Label(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    EXCLUDED = "Excluded"


class DurationClass(str, enum.Enum):
    FOUR_MINUTE = "FourMinute"
    THIRTY_SECOND = "ThirtySecond"

    @property
    def samples(self) -> int:
        return 11_520_000 if self is DurationClass.FOUR_MINUTE else 1_440_000

    @property
    def seconds(self) -> int:
        return 240 if self is DurationClass.FOUR_MINUTE else 30


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RecordingEntry:
    path: str
    deployment: str
    label: Label
    other_sources: frozenset[str] = frozenset()
    duration_class: DurationClass = DurationClass.FOUR_MINUTE


@dataclass
class DatasetManifest:
    entries: list[RecordingEntry]
    seed: int = 0
    split_fraction: float = 0.8
    root: Path | None = field(default=None, compare=False)

    def with_entries(self, entries: list[RecordingEntry]) -> "DatasetManifest":
        return replace(self, entries=list(entries))

    def of_label(self, label: Label) -> list[RecordingEntry]:
        return [e for e in self.entries if e.label is label]

    def resolve(self, entry: RecordingEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def deployments(self) -> list[str]:
        return sorted({e.deployment for e in self.entries})

    # -- CSV -----------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in self.entries:
            writer.writerow([e.path, e.deployment, e.label.value, ";".join(sorted(e.other_sources)),
                             e.duration_class.value])
        return buf.getvalue()

    def save(self, path) -> None:
        fileio.write_text_atomic(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str, seed: int = 0, split_fraction: float = 0.8, root=None) -> "DatasetManifest":
        reader = csv.DictReader(io.StringIO(text))
        missing = [f for f in MANIFEST_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"manifest header lacks columns {missing}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            try:
                label = Label(row["label"].strip())
            except ValueError:
                log.info("line %d: label %r treated as Excluded", lineno, row["label"])
                label = Label.EXCLUDED
            try:
                duration = DurationClass(row["duration_class"].strip())
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown duration_class {row['duration_class']!r}") from None
            tags = frozenset(t.strip() for t in row["other_sources"].split(";") if t.strip())
            entries.append(RecordingEntry(row["path"], row["deployment"], label, tags, duration))
        return cls(entries, seed, split_fraction, Path(root) if root is not None else None)

    @classmethod
    def load(cls, path, seed: int = 0, split_fraction: float = 0.8) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest {path} does not exist")
        return cls.from_csv(path.read_text(), seed, split_fraction, root=path.parent)


# -- balancing ---------------------------------------------------------------------------

def _largest_remainder(total: int, weights: dict[str, int]) -> dict[str, int]:
    """Split ``total`` proportionally to integer weights; ties go to the earlier key."""
    wsum = sum(weights.values())
    if total <= 0 or wsum == 0:
        return {k: 0 for k in weights}
    exact = {k: total * w / wsum for k, w in weights.items()}
    alloc = {k: int(np.floor(v)) for k, v in exact.items()}
    left = total - sum(alloc.values())
    for k in sorted(weights, key=lambda k: -(exact[k] - alloc[k]))[:left]:
        alloc[k] += 1
    return alloc


def _subsample(pool: list[RecordingEntry], target: int, other: list[RecordingEntry],
               rng: np.random.Generator, prefer_tagged: bool) -> set[int]:
    """Ids of pool entries kept so that each deployment keeps about as many as ``other`` has there."""
    by_dep: dict[str, list[int]] = {}
    for i, e in enumerate(pool):
        by_dep.setdefault(e.deployment, []).append(i)
    other_count: dict[str, int] = {}
    for e in other:
        other_count[e.deployment] = other_count.get(e.deployment, 0) + 1
    deps = sorted(by_dep)
    quota = {d: min(len(by_dep[d]), other_count.get(d, 0)) for d in deps}
    surplus = {d: len(by_dep[d]) - quota[d] for d in deps}
    extra = _largest_remainder(target - sum(quota.values()), surplus)
    keep: set[int] = set()
    for d in deps:
        idx = by_dep[d]
        k = quota[d] + extra[d]
        if prefer_tagged:
            tagged = [i for i in idx if pool[i].other_sources]
            plain = [i for i in idx if not pool[i].other_sources]
            order = list(rng.permutation(tagged)) + list(rng.permutation(plain))
        else:
            order = list(rng.permutation(idx))
        keep.update(int(i) for i in order[:k])
    return keep


def balance(manifest: DatasetManifest, rng_seed: int) -> DatasetManifest:
    """Equal positive and negative counts with Excluded entries dropped.

    Negatives are subsampled per deployment: each deployment first keeps as
    many negatives as it has positives, and any shortfall is spread over the
    deployments with spare negatives in proportion to their surplus.  Tagged
    negatives (other impulsive sources) are taken before untagged ones.  If
    positives are the larger class they are subsampled the same way instead.
    Entry order is preserved, so balancing twice changes nothing.
    """
    pos = manifest.of_label(Label.POSITIVE)
    neg = manifest.of_label(Label.NEGATIVE)
    if not pos:
        raise ManifestError("no positive entries")
    if not neg:
        raise ManifestError("no negative entries")
    rng = np.random.default_rng(rng_seed)
    if len(neg) >= len(pos):
        keep = _subsample(neg, len(pos), pos, rng, prefer_tagged=True)
        kept = [e for e in manifest.entries if e.label is Label.POSITIVE] + [neg[i] for i in sorted(keep)]
    else:
        log.warning("more positives (%d) than negatives (%d); subsampling positives", len(pos), len(neg))
        keep = _subsample(pos, len(neg), neg, rng, prefer_tagged=False)
        kept = [pos[i] for i in sorted(keep)] + neg
    kept_ids = {id(e) for e in kept}
    return manifest.with_entries([e for e in manifest.entries if id(e) in kept_ids])


# -- splitting ---------------------------------------------------------------------------

def _hash_key(seed: int, entry: RecordingEntry) -> str:
    return hashlib.sha256(f"{seed}\x00{entry.path}\x00{entry.deployment}".encode()).hexdigest()


def split(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic stratified split into (train, val).

    Each label contributes ``round(fraction * count)`` entries to train,
    spread over deployments by largest remainder; within a deployment the
    entries with the smallest seeded hash go to train.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie strictly between 0 and 1, got {fraction}")
    train_ids: set[int] = set()
    for label in (Label.POSITIVE, Label.NEGATIVE):
        members = manifest.of_label(label)
        groups: dict[str, list[RecordingEntry]] = {}
        for e in members:
            groups.setdefault(e.deployment, []).append(e)
        alloc = _largest_remainder(int(round(fraction * len(members))),
                                   {d: len(groups[d]) for d in sorted(groups)})
        for d, group in groups.items():
            ranked = sorted(group, key=lambda e: _hash_key(seed, e))
            train_ids.update(id(e) for e in ranked[:alloc[d]])
    usable = [e for e in manifest.entries if e.label is not Label.EXCLUDED]
    train = [e for e in usable if id(e) in train_ids]
    val = [e for e in usable if id(e) not in train_ids]
    return (replace(manifest, entries=train, seed=seed, split_fraction=fraction),
            replace(manifest, entries=val, seed=seed, split_fraction=fraction))


def split_record(train: DatasetManifest, val: DatasetManifest, seed: int) -> dict:
    """Audit record of a split."""
    return {"seed": seed, "train": [e.path for e in train.entries], "val": [e.path for e in val.entries]}
