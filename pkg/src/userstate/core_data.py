"""Shared data model: clips, labels, pools, training config, manifests and folds.

On-disk formats
---------------
Manifest (``*.jsonl``): one JSON object per line. An optional first line
``{"format": "segment-manifest", "version": 1}`` declares the format version.
Every other line is a segment record with the fields

    media_id    str     identifier of the source recording
    start       float   span start in seconds
    end         float   span end in seconds (must be > start)
    audio       bool    audio modality present
    face        bool    face modality present
    label       int     class index 0..3, or null for unlabeled segments
    agreement   float   annotator agreement in [0, 1], or null
    audio_clip  str     optional path (relative to the manifest) of the latent clip
    face_clip   str     optional path of the landmark clip

Clip files (``*.clip``): a 16-byte little-endian header followed by the raw
float32 payload in C order::

    bytes 0-3    magic b"CLIP"
    bytes 4-5    uint16 format version (1)
    bytes 6-7    uint16 flags (bit 0: normalized)
    bytes 8-13   uint16 x 3 array dims
    bytes 14-15  reserved (0)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CLASS_NAMES = ("agreement", "disagreement", "confusion", "neutral")
NUM_CLASSES = 4
NEUTRAL = 3

CLIP_FRAMES = 30
NUM_LANDMARKS = 68
LATENT_SIZE = 50

MANIFEST_FORMAT = "segment-manifest"
MANIFEST_VERSION = 1
CLIP_MAGIC = b"CLIP"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<4sHHHHHH")


class ManifestError(ValueError):
    """Raised for unparsable or invalid manifest records."""


class ClipFormatError(ValueError):
    pass


def one_hot(index: int) -> np.ndarray:
    if not 0 <= int(index) < NUM_CLASSES:
        raise ValueError(f"class index {index} outside 0..{NUM_CLASSES - 1}")
    y = np.zeros(NUM_CLASSES, dtype=np.float32)
    y[int(index)] = 1.0
    return y


@dataclass(frozen=True)
class LandmarkClip:
    """30 frames of 68 3D landmarks."""

    frames: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.shape != (CLIP_FRAMES, NUM_LANDMARKS, 3):
            raise ValueError(f"landmark clip must be (30, 68, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("landmark clip contains non-finite coordinates")
        if self.normalized and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("normalized landmark clip has coordinates outside [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class LatentClip:
    """30 stacked 50-value quantized audio latents, shape (30, 50, 1)."""

    latents: np.ndarray

    def __post_init__(self):
        latents = np.asarray(self.latents, dtype=np.float32)
        if latents.shape == (CLIP_FRAMES, LATENT_SIZE):
            latents = latents[..., None]
        if latents.shape != (CLIP_FRAMES, LATENT_SIZE, 1):
            raise ValueError(f"latent clip must be (30, 50, 1), got {latents.shape}")
        latents.setflags(write=False)
        object.__setattr__(self, "latents", latents)

    def in_codebook(self, codebook: np.ndarray) -> bool:
        entries = np.asarray(codebook, dtype=np.float32).reshape(-1)
        return bool(np.isin(self.latents.reshape(-1), entries).all())


@dataclass(frozen=True)
class LabeledExample:
    label: np.ndarray
    audio: LatentClip | None = None
    face: LandmarkClip | None = None

    def __post_init__(self):
        if self.audio is None and self.face is None:
            raise ValueError("labeled example needs at least one modality")
        label = np.asarray(self.label, dtype=np.float32)
        if label.shape != (NUM_CLASSES,) or label.sum() != 1.0 or label.max() != 1.0:
            raise ValueError("label must be a one-hot 4-vector")
        object.__setattr__(self, "label", label)

    @property
    def class_index(self) -> int:
        return int(np.argmax(self.label))


@dataclass(frozen=True)
class UnlabeledPool:
    """Homogeneous single-modality pool stored as one stacked array.

    ``hidden_labels`` is only populated by the synthetic generator and is used
    for post-hoc auditing of distillation, never for training.
    """

    items: np.ndarray
    modality: str
    hidden_labels: np.ndarray | None = None
    pool_id: str = "raw"

    def __post_init__(self):
        if self.modality not in ("audio", "face"):
            raise ValueError(f"unknown modality {self.modality!r}")
        expected = (CLIP_FRAMES, LATENT_SIZE, 1) if self.modality == "audio" else (CLIP_FRAMES, NUM_LANDMARKS, 3)
        items = np.asarray(self.items, dtype=np.float32)
        if len(items) and items.shape[1:] != expected:
            raise ValueError(f"{self.modality} pool items must be {expected}, got {items.shape[1:]}")
        if len(items) == 0:
            items = items.reshape((0,) + expected)
        object.__setattr__(self, "items", items)

    def __len__(self):
        return len(self.items)

    def subset(self, indices: Sequence[int], pool_id: str) -> "UnlabeledPool":
        idx = np.asarray(indices, dtype=np.int64)
        hidden = None if self.hidden_labels is None else self.hidden_labels[idx]
        return UnlabeledPool(self.items[idx], self.modality, hidden, pool_id)


@dataclass(frozen=True)
class DistilledPool:
    items: np.ndarray
    source_epoch: int
    modality: str = ""

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    unlabeled_factor: int = 10
    distill_start: int = 10
    total_epochs: int = 500
    fixmatch_threshold: float = 0.95
    beta1: float = 1.0
    beta2: float = 3.0
    beta3: float = 2.0
    folds: int = 5
    seed: int = 0
    # optimizer settings; the defaults follow common FixMatch practice
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    steps_per_epoch: int | None = None
    # re-estimate BN running statistics on clean labeled inputs after every epoch
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.unlabeled_factor < 1:
            raise ValueError("unlabeled_factor must be >= 1")
        if not 0.0 < self.fixmatch_threshold < 1.0:
            raise ValueError("fixmatch_threshold must lie in (0, 1)")
        if self.distill_start > self.total_epochs:
            raise ValueError("distill_start must not exceed total_epochs")
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")

    @property
    def distill_threshold(self) -> float:
        return self.fixmatch_threshold ** 3

    @property
    def unlabeled_batch_size(self) -> int:
        return self.batch_size * self.unlabeled_factor

    @classmethod
    def published_preset(cls, **overrides) -> "TrainConfig":
        values = dict(batch_size=12, unlabeled_factor=10, distill_start=10, total_epochs=500,
                      beta1=1.0, beta2=3.0, beta3=2.0, folds=5)
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class SegmentEntry:
    media_id: str
    start: float
    end: float
    audio: bool = False
    face: bool = False
    label: int | None = None
    agreement: float | None = None
    audio_clip: str | None = None
    face_clip: str | None = None

    def validate(self, where: str = "") -> None:
        if not self.media_id:
            raise ManifestError(f"{where}field 'media_id' must be a non-empty string")
        if not self.end > self.start:
            raise ManifestError(f"{where}field 'end' must exceed 'start' (span has no positive duration)")
        if not (self.audio or self.face):
            raise ManifestError(f"{where}fields 'audio'/'face': at least one modality flag must be set")
        if self.label is not None and (isinstance(self.label, bool) or self.label not in range(NUM_CLASSES)):
            raise ManifestError(f"{where}field 'label' must be a class index in 0..3, got {self.label!r}")
        if self.agreement is not None and not 0.0 <= self.agreement <= 1.0:
            raise ManifestError(f"{where}field 'agreement' must lie in [0, 1]")


@dataclass(frozen=True)
class SegmentManifest:
    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def labeled_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.label is not None]


_ENTRY_FIELDS = {f for f in SegmentEntry.__dataclass_fields__}


def load_manifest(path) -> SegmentManifest:
    """Parse a line-delimited manifest, validating every record."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: parse error: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ManifestError(f"line {lineno}: parse error: record is not an object")
            if "format" in record:
                if record.get("format") != MANIFEST_FORMAT or record.get("version") != MANIFEST_VERSION:
                    raise ManifestError(f"line {lineno}: unsupported manifest header {record}")
                continue
            unknown = set(record) - _ENTRY_FIELDS
            if unknown:
                raise ManifestError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
            try:
                entry = SegmentEntry(**record)
            except TypeError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            entry.validate(where=f"line {lineno}: ")
            entries.append(entry)
    return SegmentManifest(tuple(entries))


def save_manifest(manifest: SegmentManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}) + "\n")
        for entry in manifest:
            entry.validate()
            record = {k: getattr(entry, k) for k in SegmentEntry.__dataclass_fields__}
            fh.write(json.dumps(record) + "\n")


def write_clip(path, array: np.ndarray, normalized: bool = False) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ClipFormatError(f"clip arrays must be 3-D, got shape {arr.shape}")
    header = _CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, int(normalized), *arr.shape, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_clip(path) -> tuple[np.ndarray, bool]:
    """Return ``(array, normalized_flag)`` from a clip file."""
    raw = Path(path).read_bytes()
    if len(raw) < _CLIP_HEADER.size:
        raise ClipFormatError(f"{path}: truncated header")
    magic, version, flags, d0, d1, d2, _ = _CLIP_HEADER.unpack_from(raw)
    if magic != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported clip version {version}")
    payload = raw[_CLIP_HEADER.size:]
    if len(payload) != 4 * d0 * d1 * d2:
        raise ClipFormatError(f"{path}: payload size does not match dims {(d0, d1, d2)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(d0, d1, d2).astype(np.float32)
    return arr, bool(flags & 1)


def make_folds(manifest, folds: int, seed: int, stratify: bool = False,
               labels: Sequence[int] | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split entry indices into ``folds`` (train, validation) partitions.

    ``manifest`` may be a SegmentManifest or an integer count. Validation
    folds are disjoint, cover every index and differ in size by at most one.
    With ``stratify=True`` the per-class orders are dealt round-robin so each
    fold gets a near-equal share of every class.
    """
    n = manifest if isinstance(manifest, (int, np.integer)) else len(manifest)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"too few entries ({n}) for {folds} folds")
    rng = np.random.default_rng(seed)
    if stratify:
        if labels is None:
            labels = [e.label for e in manifest]
        labels = np.asarray([-1 if l is None else l for l in labels])
        order = []
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            order.extend(rng.permutation(members))
        order = np.asarray(order)
    else:
        order = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % folds
    splits = []
    for f in range(folds):
        val = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        splits.append((train, val))
    return splits


class EmptyPoolError(ValueError):
    pass


def batch_iterator(n: int, size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index batches over ``range(n)`` for one epoch, dropping the short tail.

    The permutation is drawn from ``seed + epoch`` so every epoch reshuffles
    deterministically. An empty pool raises EmptyPoolError on first use.
    """
    if size < 1:
        raise ValueError("batch size must be >= 1")
    if n == 0:
        raise EmptyPoolError("cannot batch an empty pool")
    order = np.random.default_rng(seed + epoch).permutation(n)
    for start in range(0, n - size + 1, size):
        yield order[start:start + size]


def num_batches(n: int, size: int) -> int:
    return n // size


class BatchCycler:
    """Endless stream of drop-last batches that reshuffles at each pass."""

    def __init__(self, n: int, size: int, seed: int):
        if n < size:
            raise EmptyPoolError(f"pool of {n} cannot fill a batch of {size}")
        self.n, self.size, self.seed = n, size, seed
        self.epoch = 0
        self._it = batch_iterator(n, size, seed, 0)

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        try:
            return next(self._it)
        except StopIteration:
            self.epoch += 1
            self._it = batch_iterator(self.n, self.size, self.seed, self.epoch)
            return next(self._it)


@dataclass
class LabeledSet:
    """Stacked single-modality labeled data: ``x`` (N, ...) and class indices ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.x[idx], self.y[idx])


@dataclass
class PairedSet:
    """Dual-modality labeled data used for the fusion network."""

    audio: np.ndarray
    face: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float32)
        self.face = np.asarray(self.face, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not len(self.audio) == len(self.face) == len(self.y):
            raise ValueError("paired set arrays differ in length")

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "PairedSet":
        return PairedSet(self.audio[idx], self.face[idx], self.y[idx])


@dataclass
class TrainingData:
    """The five collections consumed by the trainer."""

    audio: LabeledSet
    face: LabeledSet
    combined: PairedSet
    unlabeled_audio: UnlabeledPool
    unlabeled_face: UnlabeledPool
    extra: dict = field(default_factory=dict)


def stack_examples(examples: Sequence[LabeledExample]):
    """Split a list of LabeledExamples into audio, face and combined sets."""
    a = [(e.audio.latents, e.class_index) for e in examples if e.audio is not None]
    f = [(e.face.frames, e.class_index) for e in examples if e.face is not None]
    c = [(e.audio.latents, e.face.frames, e.class_index) for e in examples
         if e.audio is not None and e.face is not None]
    audio = LabeledSet(np.stack([x for x, _ in a]) if a else np.zeros((0, 30, 50, 1)), [y for _, y in a])
    face = LabeledSet(np.stack([x for x, _ in f]) if f else np.zeros((0, 30, 68, 3)), [y for _, y in f])
    combined = PairedSet(
        np.stack([x for x, _, _ in c]) if c else np.zeros((0, 30, 50, 1)),
        np.stack([x for _, x, _ in c]) if c else np.zeros((0, 30, 68, 3)),
        [y for _, _, y in c],
    )
    return audio, face, combined
