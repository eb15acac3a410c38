"""Synthetic multi-dialect dataset generation, the dataset file format, and
padded mini-batching.

A synthetic "dialect" is a systematic affine distortion of shared class
acoustics: every dialect draws frame labels from one Markov chain over C
classes, but emits ``transform @ class_mean + shift + noise``. The native
profile keeps the identity transform and gets several times more utterances
than each accent, and one accent is held out of training entirely so unseen
dialect handling can be measured.

Dataset files are JSON lines: a header record followed by one utterance
record per line (see docs/file_formats.md for the grammar).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

__all__ = [
    "Batch",
    "Dataset",
    "DatasetFormatError",
    "DatasetManifest",
    "DialectProfile",
    "DialectSpec",
    "Utterance",
    "batch_iterator",
    "build_manifest",
    "default_spec",
    "generate_bundle",
    "load_dataset",
    "save_dataset",
    "synth_generate",
]

DATASET_FORMAT = "dialectam-utterances-v1"
SPLITS = ("train", "dev", "test")


@dataclass
class Utterance:
    """One feature sequence with frame labels and a dialect tag."""

    utt_id: str
    dialect: str
    frames: np.ndarray  # [T, F] float64
    labels: np.ndarray  # [T] int64

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"utterance {self.utt_id!r}: frames must be [T>=1, F]")
        if self.labels.shape != (self.frames.shape[0],):
            raise ValueError(f"utterance {self.utt_id!r}: labels length != frame count")

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class Dataset:
    utterances: list
    feature_dim: int
    num_classes: int

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, idx):
        return self.utterances[idx]

    def dialects(self):
        return sorted({u.dialect for u in self.utterances})

    def filter_dialect(self, name):
        return Dataset([u for u in self.utterances if u.dialect == name],
                       self.feature_dim, self.num_classes)

    def total_frames(self):
        return sum(u.num_frames for u in self.utterances)


@dataclass
class DialectProfile:
    """How one dialect distorts the shared class acoustics, plus its sizes."""

    name: str
    transform: np.ndarray  # [F, F]
    shift: np.ndarray      # [F]
    noise_scale: float
    num_train: int
    num_dev: int
    num_test: int
    min_len: int = 20
    max_len: int = 40

    def count(self, split):
        return {"train": self.num_train, "dev": self.num_dev, "test": self.num_test}[split]


@dataclass
class DialectSpec:
    """Shared class acoustics plus one profile per dialect.

    ``channel_gain``/``channel_offset`` add a per-utterance nuisance (a
    scalar gain drawn from the given range and a per-channel offset), the
    synthetic stand-in for recording-channel variation. It rides on top of
    the per-dialect transform, so utterance-level adaptation has something
    dialect-independent to normalize away in the low layers.
    """

    feature_dim: int
    num_classes: int
    class_means: np.ndarray   # [C, F]
    transitions: np.ndarray   # [C, C], rows sum to 1
    profiles: list = field(default_factory=list)
    held_out: str | None = None
    channel_gain: tuple = (1.0, 1.0)
    channel_offset: float = 0.0

    def validate(self):
        c, f = self.num_classes, self.feature_dim
        if self.class_means.shape != (c, f):
            raise ValueError(f"class_means shape {self.class_means.shape} != ({c}, {f})")
        if self.transitions.shape != (c, c):
            raise ValueError(f"transitions shape {self.transitions.shape} != ({c}, {c})")
        if np.any(self.transitions < 0) or not np.allclose(self.transitions.sum(axis=1), 1.0):
            raise ValueError("transition rows must be non-negative and sum to 1")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dialect names in spec")
        if self.held_out is not None and self.held_out not in names:
            raise ValueError(f"held-out dialect {self.held_out!r} has no profile")
        for p in self.profiles:
            if p.transform.shape != (f, f) or p.shift.shape != (f,):
                raise ValueError(f"profile {p.name!r}: transform/shift shapes inconsistent with F={f}")
            if np.linalg.cond(p.transform) >= 100:
                raise ValueError(f"profile {p.name!r}: transform is ill-conditioned")
            if p.noise_scale < 0 or p.min_len < 1 or p.max_len < p.min_len:
                raise ValueError(f"profile {p.name!r}: bad noise scale or length range")
        lo, hi = self.channel_gain
        if not 0 < lo <= hi or self.channel_offset < 0:
            raise ValueError("bad channel gain range or offset scale")

    def train_dialects(self):
        return [p.name for p in self.profiles if p.num_train > 0]


def _random_orthogonal(rng, dim):
    gauss = rng.normal(0.0, 1.0, (dim, dim))
    q, r = np.linalg.qr(gauss)
    return q * np.sign(np.diag(r))  # fix the sign convention so Q is unique


def default_spec(feature_dim=8, num_classes=10, seed=7,
                 native_train=480, accent_train=120, dev_frac=0.2, num_test=40,
                 num_accents=6, noise_scale=0.6, mixing=(0.45, 0.7),
                 shared_weight=0.6, min_len=30, max_len=50,
                 channel_gain=(0.6, 1.5), channel_offset=0.5):
    """Desk-scale spec: a native dialect, ``num_accents`` training accents,
    and one held-out accent, all sharing class means and transitions.

    The native profile keeps identity acoustics and several times more data
    than each accent. Every accent blends one shared distortion (the common
    traits of nonnative speech) with its own random rotation, plus a shift
    and a mild per-channel scale, so accents are systematically different
    from native yet resemble each other; the held-out accent is drawn from
    the same family, which is what makes a generic learned fallback
    conditioning plausible for it.
    """
    rng = Rng(seed)
    means = rng.normal(0.0, 1.0, (num_classes, feature_dim))
    means *= 2.75 / np.linalg.norm(means, axis=1, keepdims=True)
    self_prob = 0.75
    transitions = np.full((num_classes, num_classes), (1.0 - self_prob) / (num_classes - 1))
    np.fill_diagonal(transitions, self_prob)

    common_core = _random_orthogonal(rng, feature_dim)
    common_shift = rng.normal(0.0, 0.35, feature_dim)

    def accent_profile(name, num_train, num_dev, num_test, strength=None):
        if strength is None:
            strength = rng.uniform(*mixing)
        own = _random_orthogonal(rng, feature_dim)
        mixed = shared_weight * common_core + (1.0 - shared_weight) * own
        transform = (1.0 - strength) * np.eye(feature_dim) + strength * mixed
        transform = transform @ np.diag(rng.uniform(0.85, 1.2, feature_dim))
        shift = common_shift + rng.normal(0.0, 0.3, feature_dim)
        return DialectProfile(name=name, transform=transform, shift=shift,
                              noise_scale=noise_scale, num_train=num_train,
                              num_dev=num_dev, num_test=num_test,
                              min_len=min_len, max_len=max_len)

    profiles = [DialectProfile(
        name="native", transform=np.eye(feature_dim), shift=np.zeros(feature_dim),
        noise_scale=noise_scale, num_train=native_train,
        num_dev=max(1, int(native_train * dev_frac)), num_test=num_test,
        min_len=min_len, max_len=max_len)]
    for k in range(num_accents):
        name = f"accent_{chr(ord('a') + k)}"
        profiles.append(accent_profile(
            name, accent_train, max(1, int(accent_train * dev_frac)), num_test))
    # Held-out accent: mid-strength, so it sits inside the accent family.
    profiles.append(accent_profile("accent_x", 0, 0, num_test,
                                   strength=0.5 * (mixing[0] + mixing[1])))

    spec = DialectSpec(feature_dim=feature_dim, num_classes=num_classes,
                       class_means=means, transitions=transitions,
                       profiles=profiles, held_out="accent_x",
                       channel_gain=channel_gain, channel_offset=channel_offset)
    spec.validate()
    return spec


def _sample_labels(rng, transitions, length):
    cum = np.cumsum(transitions, axis=1)
    labels = np.empty(length, dtype=np.int64)
    labels[0] = rng.integers(0, transitions.shape[0])
    for t in range(1, length):
        labels[t] = np.searchsorted(cum[labels[t - 1]], rng.random())
    return labels


def synth_generate(spec, seed, split="train"):
    """Generate the named split; deterministic in (spec, seed, split)."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    spec.validate()
    rng = Rng(seed)
    utterances = []
    gain_lo, gain_hi = spec.channel_gain
    for profile in spec.profiles:
        for k in range(profile.count(split)):
            length = int(rng.integers(profile.min_len, profile.max_len + 1))
            labels = _sample_labels(rng, spec.transitions, length)
            clean = spec.class_means[labels] @ profile.transform.T + profile.shift
            gain = rng.uniform(gain_lo, gain_hi)
            offset = rng.normal(0.0, spec.channel_offset, spec.feature_dim) \
                if spec.channel_offset > 0 else 0.0
            frames = gain * clean + offset \
                + rng.normal(0.0, profile.noise_scale, (length, spec.feature_dim))
            utterances.append(Utterance(
                utt_id=f"{profile.name}-{split}-{k:04d}", dialect=profile.name,
                frames=frames, labels=labels))
    return Dataset(utterances, spec.feature_dim, spec.num_classes)


def generate_bundle(spec, seed):
    """The three splits from one seed, each on an independent derived stream."""
    root = Rng(seed)
    return {split: synth_generate(spec, root.derive(i).seed, split)
            for i, split in enumerate(SPLITS)}


class DatasetFormatError(ValueError):
    pass


def save_dataset(dataset, path):
    """Write JSON-lines: one header line, then one utterance per line."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": DATASET_FORMAT, "feature_dim": dataset.feature_dim,
                  "num_classes": dataset.num_classes, "count": len(dataset)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for utt in dataset:
            record = {"id": utt.utt_id, "dialect": utt.dialect,
                      "labels": utt.labels.tolist(), "frames": utt.frames.tolist()}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _record_error(line_no, message):
    return DatasetFormatError(f"line {line_no}: {message}")


def load_dataset(path):
    """Parse a dataset file; every field round-trips bit-exactly.

    Raises :class:`DatasetFormatError` with the offending line number for
    malformed records, non-finite features, or out-of-range labels.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise _record_error(1, "empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise _record_error(1, f"bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise _record_error(1, f"not a {DATASET_FORMAT} file")
    try:
        feature_dim = int(header["feature_dim"])
        num_classes = int(header["num_classes"])
        count = int(header["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise _record_error(1, f"bad header fields: {exc}") from exc

    utterances = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise _record_error(line_no, f"malformed record: {exc}") from exc
        try:
            frames = np.asarray(rec["frames"], dtype=np.float64)
            labels = np.asarray(rec["labels"], dtype=np.int64)
            utt = Utterance(utt_id=rec["id"], dialect=rec["dialect"],
                            frames=frames, labels=labels)
        except (KeyError, TypeError, ValueError) as exc:
            raise _record_error(line_no, f"malformed record: {exc}") from exc
        if utt.frames.shape[1] != feature_dim:
            raise _record_error(line_no, f"feature width {utt.frames.shape[1]} != header {feature_dim}")
        if not np.isfinite(utt.frames).all():
            raise _record_error(line_no, "non-finite feature value")
        if utt.labels.min() < 0 or utt.labels.max() >= num_classes:
            raise _record_error(line_no, f"label out of range [0, {num_classes})")
        utterances.append(utt)
    if len(utterances) != count:
        raise _record_error(len(lines), f"header promises {count} utterances, found {len(utterances)}")
    return Dataset(utterances, feature_dim, num_classes)


@dataclass
class Batch:
    """Zero-padded frames with a 0/1 mask; label slots under padding are -1."""

    frames: np.ndarray   # [B, T_max, F]
    mask: np.ndarray     # [B, T_max]
    labels: np.ndarray   # [B, T_max]
    dialects: list | None
    indices: list

    @property
    def size(self):
        return self.frames.shape[0]

    def num_frames(self):
        return int(self.mask.sum())


def batch_iterator(dataset, batch_size, seed=0, shuffle=False, dialect_overrides=None):
    """Yield padded batches; the shuffle is seeded and the short final batch
    is emitted.

    ``dialect_overrides``, when given, is one label per utterance in dataset
    order (used for unknown-dialect relabeling without touching the dataset).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if dialect_overrides is not None and len(dialect_overrides) != len(dataset):
        raise ValueError("dialect_overrides length must match the dataset")
    order = list(range(len(dataset)))
    if shuffle:
        order = [order[i] for i in Rng(seed).permutation(len(order))]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        utts = [dataset[i] for i in chunk]
        t_max = max(u.num_frames for u in utts)
        frames = np.zeros((len(utts), t_max, dataset.feature_dim))
        mask = np.zeros((len(utts), t_max))
        labels = np.full((len(utts), t_max), -1, dtype=np.int64)
        for row, utt in enumerate(utts):
            t = utt.num_frames
            frames[row, :t] = utt.frames
            mask[row, :t] = 1.0
            labels[row, :t] = utt.labels
        if dialect_overrides is not None:
            dialects = [dialect_overrides[i] for i in chunk]
        else:
            dialects = [u.dialect for u in utts]
        yield Batch(frames=frames, mask=mask, labels=labels, dialects=dialects, indices=chunk)


@dataclass
class DatasetManifest:
    """Per-dialect utterance and frame counts for one dataset."""

    per_dialect: dict

    @property
    def num_utterances(self):
        return sum(v["utterances"] for v in self.per_dialect.values())

    @property
    def num_frames(self):
        return sum(v["frames"] for v in self.per_dialect.values())

    def to_dict(self):
        return {"per_dialect": self.per_dialect,
                "total_utterances": self.num_utterances,
                "total_frames": self.num_frames}


def build_manifest(dataset):
    per = {}
    for utt in dataset:
        entry = per.setdefault(utt.dialect, {"utterances": 0, "frames": 0})
        entry["utterances"] += 1
        entry["frames"] += utt.num_frames
    return DatasetManifest(per_dialect={name: per[name] for name in sorted(per)})
