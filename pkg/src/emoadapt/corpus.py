"""Corpus manifests, arousal/valence label mapping, subsampling and batching."""

from __future__ import annotations

import csv
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import dsp
from .errors import DataError

PARTITIONS = ("train", "dev", "test")
MANIFEST_HEADER = ["corpus_id", "audio_path", "label", "speaker", "partition"]
AROUSAL_CLASSES = ("low", "high")
VALENCE_CLASSES = ("negative", "neutral", "positive")

# labels used by the synthetic generator, one per distinct Table AV cell first
SYNTH_LABELS = ("sadness", "anger", "happiness", "neutral", "surprise", "kindness", "fear", "boredom")


@dataclass(frozen=True)
class Sample:
    corpus_id: str
    audio_path: str
    label: str
    speaker: str
    partition: str


@dataclass
class CorpusManifest:
    corpus_id: str
    samples: list
    label_space: tuple
    root: Path | None = None

    def partition(self, name: str) -> list:
        return [s for s in self.samples if s.partition == name]

    def label_index(self, label: str) -> int:
        return self.label_space.index(label)

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def audio_file(self, sample: Sample) -> Path:
        p = Path(sample.audio_path)
        return p if p.is_absolute() or self.root is None else self.root / p


@dataclass
class Batch:
    features: np.ndarray  # (N, 1, 64, W_max), zero padded
    lengths: np.ndarray
    labels: np.ndarray
    domain_id: str


def load_manifest(path, label_space=None) -> CorpusManifest:
    """Read and validate a manifest CSV.

    ``label_space`` fixes the class order; by default it is the sorted set of
    labels present. Relative audio paths resolve against the manifest's folder.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_HEADER:
                raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
            rows = [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: manifest has no samples")
    corpus_ids = {r["corpus_id"] for r in rows}
    if len(corpus_ids) != 1:
        raise DataError(f"{path}: expected one corpus_id, found {sorted(corpus_ids)}")
    samples = [Sample(r["corpus_id"], r["audio_path"], r["label"], r["speaker"], r["partition"]) for r in rows]
    if label_space is None:
        label_space = sorted({s.label for s in samples})
    manifest = CorpusManifest(corpus_ids.pop(), samples, tuple(label_space), path.parent)
    validate(manifest, source=str(path))
    return manifest


def validate(manifest: CorpusManifest, source: str = "manifest") -> None:
    if not manifest.label_space:
        raise DataError(f"{source}: empty label space")
    if len(set(manifest.label_space)) != len(manifest.label_space):
        raise DataError(f"{source}: duplicate labels in label space")
    seen = set()
    speakers = defaultdict(set)
    for s in manifest.samples:
        if s.partition not in PARTITIONS:
            raise DataError(f"{source}: unknown partition tag {s.partition!r} for {s.audio_path}")
        if s.audio_path in seen:
            raise DataError(f"{source}: duplicate audio_path {s.audio_path}")
        seen.add(s.audio_path)
        if s.label not in manifest.label_space:
            raise DataError(f"{source}: label {s.label!r} not in label space")
        if s.speaker:
            speakers[s.partition].add(s.speaker)
    for i, a in enumerate(PARTITIONS):
        for b in PARTITIONS[i + 1:]:
            overlap = speakers[a] & speakers[b]
            if overlap:
                raise DataError(f"{source}: speakers {sorted(overlap)} appear in both {a} and {b}")


def write_manifest(path, samples) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            w.writerow([s.corpus_id, s.audio_path, s.label, s.speaker, s.partition])


# --------------------------------------------------------------------------
# arousal / valence mapping


def load_av_table(path=None) -> dict:
    """``label -> (arousal, valence)``; defaults to the bundled table."""
    if path is None:
        text = resources.files("emoadapt").joinpath("data/table_av.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = csv.DictReader(text.splitlines())
    return {r["label"]: (r["arousal"], r["valence"]) for r in rows}


def load_aliases(path) -> dict:
    """Alias CSV ``label,canonical_table_av_label`` -> dict."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["label", "canonical_table_av_label"]:
            raise DataError(f"{path}: alias header must be label,canonical_table_av_label")
        return {row[0].strip(): row[1].strip() for row in reader if row}


def map_to_av(label: str, mapping: dict, aliases: dict | None = None) -> tuple[str, str]:
    key = aliases.get(label, label) if aliases else label
    try:
        return mapping[key]
    except KeyError:
        raise DataError(f"label {label!r} has no arousal/valence mapping") from None


def av_class(label: str, target: str, mapping: dict, aliases: dict | None = None) -> int:
    arousal, valence = map_to_av(label, mapping, aliases)
    if target == "arousal":
        return AROUSAL_CLASSES.index(arousal)
    if target == "valence":
        return VALENCE_CLASSES.index(valence)
    raise ValueError(f"unknown target {target!r}")


# --------------------------------------------------------------------------
# subsampling and aggregation


def balanced_subsample(samples, class_of, rng: np.random.Generator) -> list:
    """Keep ``min class count`` samples of every class present, original order preserved."""
    samples = list(samples)
    by_class = defaultdict(list)
    for i, s in enumerate(samples):
        by_class[class_of(s)].append(i)
    if not by_class:
        return []
    n = min(len(v) for v in by_class.values())
    keep = []
    for c in sorted(by_class):
        idx = by_class[c]
        keep.extend(idx if len(idx) == n else rng.choice(idx, size=n, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


def aggregate(manifests, target: str, rng: np.random.Generator, mapping: dict | None = None,
              aliases: dict | None = None) -> CorpusManifest:
    """Merge corpora into one arousal or valence task.

    Labels are rewritten to the arousal/valence class name; every (corpus,
    partition) pair is balanced separately. Samples keep their source
    ``corpus_id`` so cached features can still be found.
    """
    mapping = mapping or load_av_table()
    classes = AROUSAL_CLASSES if target == "arousal" else VALENCE_CLASSES
    merged = []
    for m in manifests:
        mapped = [replace(s, label=classes[av_class(s.label, target, mapping, aliases)]) for s in m.samples]
        for part in PARTITIONS:
            subset = [s for s in mapped if s.partition == part]
            merged.extend(balanced_subsample(subset, lambda s: s.label, rng))
    return CorpusManifest(target, merged, classes)


# --------------------------------------------------------------------------
# features and batches


def cache_key(audio_path: str) -> str:
    safe = audio_path.replace("\\", "/").strip("/").replace("/", "__")
    return f"{safe}.{zlib.crc32(audio_path.encode()):08x}"


class FeatureStore:
    """Read-through cache over the on-disk feature files of many corpora."""

    def __init__(self, root):
        self.root = Path(root)
        self._memo = {}

    def stem(self, sample: Sample) -> Path:
        return self.root / sample.corpus_id / cache_key(sample.audio_path)

    def get(self, sample: Sample) -> np.ndarray:
        key = (sample.corpus_id, sample.audio_path)
        mel = self._memo.get(key)
        if mel is None:
            stem = self.stem(sample)
            if not dsp.feature_exists(stem):
                raise DataError(f"missing feature file for {sample.corpus_id}:{sample.audio_path} ({stem})")
            mel, _ = dsp.load_feature(stem)
            self._memo[key] = mel
        return mel


class MemoryStore:
    """In-memory stand-in for :class:`FeatureStore`, keyed by audio path."""

    def __init__(self, features: dict):
        self.features = features

    def get(self, sample: Sample) -> np.ndarray:
        try:
            return self.features[sample.audio_path]
        except KeyError:
            raise DataError(f"missing features for {sample.audio_path}") from None


def collate(mels, labels, domain_id: str) -> Batch:
    lengths = np.array([m.shape[1] for m in mels], dtype=np.int64)
    width = int(lengths.max())
    n_mels = mels[0].shape[0]
    x = np.zeros((len(mels), 1, n_mels, width), dtype=np.float32)
    for i, m in enumerate(mels):
        x[i, 0, :, : m.shape[1]] = m
    return Batch(x, lengths, np.asarray(labels, dtype=np.int64), domain_id)


def make_batches(samples, store, label_space, domain_id: str, batch_size: int = 64,
                 rng: np.random.Generator | None = None) -> list:
    """Split ``samples`` into zero-padded batches; shuffled when ``rng`` is given."""
    samples = list(samples)
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        mels = [store.get(s) for s in chunk]
        batches.append(collate(mels, [label_space.index(s.label) for s in chunk], domain_id))
    return batches


def class_histogram(samples) -> Counter:
    return Counter(s.label for s in samples)


# --------------------------------------------------------------------------
# synthetic corpora


def _synth_clip(rng, freq: float, seconds: float, gain: float) -> np.ndarray:
    n = int(seconds * dsp.SAMPLE_RATE)
    t = np.arange(n) / dsp.SAMPLE_RATE
    tone = 0.3 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / dsp.SAMPLE_RATE)
    spectrum[(f < 100) | (f > 4000)] = 0
    noise = np.fft.irfft(spectrum, n)
    noise *= 0.05 / max(noise.std(), 1e-12)
    return gain * (tone + noise)


def generate_synthetic_corpus(out_dir, corpus_id: str, n_classes: int, samples_per_class: int, seed: int,
                              labels=None, n_speakers: int = 10) -> Path:
    """Write WAVs plus ``manifest.csv`` for a toy corpus; returns the manifest path.

    Class ``k`` carries a tone at ``400 * (k + 1)`` Hz over 100-4000 Hz noise,
    durations are uniform in [1 s, 3 s]. Speakers ``0..5`` form train, ``6..7``
    dev and ``8..9`` test (60/20/20 with the default ten speakers).
    """
    if not 2 <= n_classes <= 8:
        raise ValueError("n_classes must be between 2 and 8")
    labels = list(labels or SYNTH_LABELS[:n_classes])
    if len(labels) != n_classes:
        raise ValueError("need one label per class")
    out = Path(out_dir) / corpus_id
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, zlib.crc32(corpus_id.encode())])
    gains = rng.uniform(0.6, 1.0, size=n_speakers)
    n_train = round(0.6 * n_speakers)
    n_dev = round(0.2 * n_speakers)
    samples = []
    for k, label in enumerate(labels):
        for i in range(samples_per_class):
            spk = i % n_speakers
            part = "train" if spk < n_train else "dev" if spk < n_train + n_dev else "test"
            rel = f"wav/{label}_{i:04d}.wav"
            clip = _synth_clip(rng, 400.0 * (k + 1), rng.uniform(1.0, 3.0), gains[spk])
            dsp.write_wav(out / rel, clip)
            samples.append(Sample(corpus_id, rel, label, f"{corpus_id}-spk{spk:02d}", part))
    path = out / "manifest.csv"
    write_manifest(path, samples)
    return path
