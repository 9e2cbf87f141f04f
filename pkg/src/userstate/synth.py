"""Controllable synthetic multimodal data for end-to-end verification.

Each class has a head-motion template and an audio latent signature:

    agreement     nod (pitch oscillation)          latent band: map row 1
    disagreement  shake (yaw oscillation)          latent band: map row 3
    confusion     tilt-and-freeze roll + brow lift latent band: rows 0 and 4, alternating in time
    neutral       idle (no motion)                 no band

Prototypes live in the canonical, normalized landmark space. Generated
clips are then given a random global head pose, scale and offset so the
face pipeline has real work to do. ``noise`` (sigma) scales every source of
within-class variability: landmark jitter, motion amplitude/phase jitter,
latent noise and the timing of the audio band. At sigma = 0 all items of a
class coincide after normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_data import (CLIP_FRAMES, LATENT_SIZE, NEUTRAL, NUM_CLASSES, NUM_LANDMARKS,
                        LabeledSet, PairedSet, UnlabeledPool)
from .face import (EYE_LEFT, EYE_RIGHT, MOUTH, NOSE_FOREMOST, OTHER_THAN_NOSE, normalize_clip,
                   pose_matrix)

CODEBOOK = np.linspace(-2.0, 3.0, 32).astype(np.float32)
BROWS = tuple(range(17, 27))


def _ellipse(center, rx, ry, n, z_bulge=0.0, start=np.pi):
    t = start + np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    x = center[0] + rx * np.cos(t)
    y = center[1] + ry * np.sin(t)
    z = center[2] + z_bulge * np.cos(t) ** 2
    return np.stack([x, y, z], axis=1)


def canonicalize(points: np.ndarray) -> np.ndarray:
    """Shift landmark groups so the three alignment targets hold exactly.

    Eye centroids get a common y and z; the mouth centroid moves under the
    eye midpoint (same x and z); the nose-foremost centroid moves in front
    of the centroid of all other landmarks (same x and y).
    """
    p = np.array(points, dtype=np.float64)
    er, el = list(EYE_RIGHT), list(EYE_LEFT)
    cr, cl = p[er].mean(0), p[el].mean(0)
    mid_yz = 0.5 * (cr[1:] + cl[1:])
    p[er, 1:] += mid_yz - cr[1:]
    p[el, 1:] += mid_yz - cl[1:]
    eye_mid = 0.5 * (p[er].mean(0) + p[el].mean(0))
    m = list(MOUTH)
    cm = p[m].mean(0)
    p[m, 0] += eye_mid[0] - cm[0]
    p[m, 2] += eye_mid[2] - cm[2]
    n = list(NOSE_FOREMOST)
    other = p[list(OTHER_THAN_NOSE)].mean(0)
    cn = p[n].mean(0)
    p[n, :2] += other[:2] - cn[:2]
    return p


def face_template() -> np.ndarray:
    """A plausible canonical 68-point face (x: right-to-left eye, y: up, z: front)."""
    p = np.zeros((NUM_LANDMARKS, 3))
    t = np.linspace(-1.0, 1.0, 17)
    p[0:17] = np.stack([1.0 * np.sin(t * 1.35), -1.2 * np.cos(t * 1.35) + 0.45, -0.6 + 0.5 * np.cos(t * 1.2)], 1)
    bx = np.linspace(-0.85, -0.2, 5)
    p[17:22] = np.stack([bx, 0.6 + 0.08 * np.sin(np.linspace(0, np.pi, 5)), np.full(5, 0.25)], 1)
    p[22:27] = p[17:22][::-1] * np.array([-1, 1, 1])
    p[27:31] = np.stack([np.zeros(4), np.linspace(0.35, -0.15, 4), np.linspace(0.3, 0.75, 4)], 1)
    p[31:36] = np.stack([np.linspace(-0.25, 0.25, 5), np.full(5, -0.28),
                         0.45 + 0.12 * np.cos(np.linspace(-np.pi / 2, np.pi / 2, 5))], 1)
    p[36:42] = _ellipse((-0.45, 0.3, 0.2), 0.17, 0.07, 6, 0.03)
    p[42:48] = _ellipse((0.45, 0.3, 0.2), 0.17, 0.07, 6, 0.03)
    p[48:60] = _ellipse((0.0, -0.62, 0.3), 0.42, 0.16, 12, 0.05)
    p[60:68] = _ellipse((0.0, -0.62, 0.32), 0.28, 0.06, 8, 0.03)
    return canonicalize(p)


@dataclass(frozen=True)
class GeneratorSpec:
    noise: float = 0.2
    label_noise: float = 0.0
    priors: tuple = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0
    motion_amplitude: float = 0.25     # radians
    latent_amplitude: float = 1.0
    landmark_jitter: float = 1.0       # landmark noise std per unit sigma (face width ~2)
    latent_jitter: float = 5.0         # latent noise std per unit sigma
    pose_range: float = 0.5            # max |angle| of the random global head pose

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")
        priors = np.asarray(self.priors, dtype=np.float64)
        if priors.shape != (NUM_CLASSES,) or np.any(priors < 0) or not np.isclose(priors.sum(), 1.0):
            raise ValueError("priors must be 4 nonnegative values summing to 1")


def _motion_angles(label: int, amp: float, phase: float, freq: float) -> np.ndarray:
    """(30, 3) roll/pitch/yaw trajectory for one class."""
    t = np.arange(CLIP_FRAMES) / CLIP_FRAMES
    ang = np.zeros((CLIP_FRAMES, 3))
    osc = amp * np.sin(2 * np.pi * freq * t + phase)
    if label == 0:
        ang[:, 1] = osc
    elif label == 1:
        ang[:, 2] = osc
    elif label == 2:
        ang[:, 0] = amp * np.clip((t - 0.1 * (1 + phase / np.pi)) / 0.3, 0.0, 1.0)
    return ang


def face_clip(label: int, spec: GeneratorSpec, rng: np.random.Generator, with_pose: bool = True) -> np.ndarray:
    """Raw (un-normalized) landmark clip of one item, shape (30, 68, 3)."""
    s = spec.noise
    template = face_template()
    amp = spec.motion_amplitude * max(0.2, 1.0 + s * rng.normal())
    phase = s * rng.uniform(-np.pi, np.pi)
    freq = 2.0 * (1.0 + 0.25 * s * rng.normal())
    ang = _motion_angles(label, amp, phase, freq)
    if label == NEUTRAL:
        ang += s * 0.1 * np.cumsum(rng.normal(size=(CLIP_FRAMES, 3)), axis=0) / np.sqrt(CLIP_FRAMES)
    shape = template.copy()
    if label == 2:
        lift = 0.12 * max(0.0, 1.0 + s * rng.normal())
        shape[list(BROWS), 1] += lift
    frames = np.empty((CLIP_FRAMES, NUM_LANDMARKS, 3))
    for t in range(CLIP_FRAMES):
        frames[t] = shape @ pose_matrix(*ang[t]).T
    frames += spec.landmark_jitter * s * rng.normal(size=frames.shape)
    if with_pose:
        g = pose_matrix(*rng.uniform(-spec.pose_range, spec.pose_range, size=3))
        scale = rng.uniform(0.7, 1.4)
        offset = rng.uniform(-5.0, 5.0, size=3)
        frames = scale * frames @ g.T + offset
    return frames


def quantize_to_codebook(values: np.ndarray, codebook: np.ndarray = CODEBOOK) -> np.ndarray:
    idx = np.abs(values[..., None] - codebook).argmin(-1)
    return codebook[idx]


def latent_clip(label: int, spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    """Codebook-valued (30, 50, 1) latent clip of one item."""
    s = spec.noise
    grid = np.zeros((CLIP_FRAMES, 5, 10))
    amp = spec.latent_amplitude * max(0.2, 1.0 + s * rng.normal())
    onset = int(np.clip(round(5 + 10 * s * rng.normal()), 0, 15))
    length = 15
    active = np.zeros(CLIP_FRAMES)
    active[onset:onset + length] = 1.0
    if label == 0:
        grid[:, 1, :] = amp * active[:, None]
    elif label == 1:
        grid[:, 3, :] = amp * active[:, None]
    elif label == 2:
        alt = (np.arange(CLIP_FRAMES) // 3) % 2
        grid[:, 0, :] = amp * (active * alt)[:, None]
        grid[:, 4, :] = amp * (active * (1 - alt))[:, None]
    values = grid.reshape(CLIP_FRAMES, LATENT_SIZE) + spec.latent_jitter * s * rng.normal(size=(CLIP_FRAMES, LATENT_SIZE))
    return quantize_to_codebook(values)[..., None].astype(np.float32)


def prototype(label: int, spec: GeneratorSpec = GeneratorSpec()):
    """Noise-free (normalized face, latent) pair of a class."""
    clean = GeneratorSpec(noise=0.0, motion_amplitude=spec.motion_amplitude,
                          latent_amplitude=spec.latent_amplitude)
    rng = np.random.default_rng(0)
    face = normalize_clip(face_clip(label, clean, rng, with_pose=False)).frames
    return face.astype(np.float32), latent_clip(label, clean, rng)


@dataclass
class SynthDataset:
    audio: np.ndarray          # (N, 30, 50, 1) codebook-valued latents
    face_raw: np.ndarray       # (N, 30, 68, 3) raw landmarks
    labels: np.ndarray         # observed labels (after label noise)
    true_labels: np.ndarray
    face: np.ndarray | None = None   # normalized landmarks, filled by normalize()
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def normalize(self, mode: str = "relative_to_first") -> "SynthDataset":
        self.face = np.stack([normalize_clip(c, mode).frames for c in self.face_raw]).astype(np.float32)
        return self

    def paired(self) -> PairedSet:
        if self.face is None:
            self.normalize()
        return PairedSet(self.audio, self.face, self.labels)


def _draw_labels(n, priors, rng, balanced):
    if balanced:
        if n % NUM_CLASSES:
            raise ValueError("balanced generation needs n divisible by 4")
        return rng.permutation(np.repeat(np.arange(NUM_CLASSES), n // NUM_CLASSES))
    return rng.choice(NUM_CLASSES, size=n, p=np.asarray(priors))


def _generate(labels, spec, rng):
    audio = np.stack([latent_clip(int(c), spec, rng) for c in labels]) if len(labels) else np.zeros((0, 30, 50, 1), np.float32)
    face = np.stack([face_clip(int(c), spec, rng) for c in labels]) if len(labels) else np.zeros((0, 30, 68, 3))
    return audio, face


def generate_labeled(n: int, spec: GeneratorSpec = GeneratorSpec(), balanced: bool = False,
                     normalize: bool = True) -> SynthDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([spec.seed, 11])
    true = _draw_labels(n, spec.priors, rng, balanced)
    audio, face = _generate(true, spec, rng)
    observed = true.copy()
    flip = rng.random(n) < spec.label_noise
    observed[flip] = (true[flip] + rng.integers(1, NUM_CLASSES, size=flip.sum())) % NUM_CLASSES
    ds = SynthDataset(audio, face, observed, true, meta={"spec": spec.__dict__})
    return ds.normalize() if normalize else ds


def generate_unlabeled(n: int, spec: GeneratorSpec = GeneratorSpec(), rare_rate: float = 0.15,
                       normalize: bool = True):
    """Audio and face pools where a ``rare_rate`` fraction of items is non-neutral.

    Hidden labels are attached to both pools for auditing only.
    """
    if not 0.0 <= rare_rate <= 1.0:
        raise ValueError("rare_rate must lie in [0, 1]")
    rng = np.random.default_rng([spec.seed, 22])
    rare = rng.random(n) < rare_rate
    hidden = np.full(n, NEUTRAL, dtype=np.int64)
    hidden[rare] = rng.integers(0, NEUTRAL, size=rare.sum())
    audio, face = _generate(hidden, spec, rng)
    if normalize:
        face = np.stack([normalize_clip(c).frames for c in face]) if n else face
    return (UnlabeledPool(audio, "audio", hidden, "raw-audio"),
            UnlabeledPool(face.astype(np.float32), "face", hidden, "raw-face"))


def labeled_sets(paired: PairedSet):
    """Audio, face and combined training sets from dual-modality data."""
    return LabeledSet(paired.audio, paired.y), LabeledSet(paired.face, paired.y), paired


def waveform_segment(label: int, rng: np.random.Generator, noise: float = 0.2, chunks: int = CLIP_FRAMES) -> np.ndarray:
    """44.1 kHz band-limited noise whose band depends on the class, length chunks * 1470."""
    from .audio import CHUNK_SAMPLES, SAMPLE_RATE
    n = chunks * CHUNK_SAMPLES
    bands = {0: (300, 800), 1: (1500, 2500), 2: (4000, 6000), NEUTRAL: (100, 200)}
    lo, hi = bands[int(label)]
    spectrum = np.zeros(n // 2 + 1, dtype=complex)
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    band = (freqs >= lo) & (freqs <= hi)
    spectrum[band] = rng.normal(size=band.sum()) + 1j * rng.normal(size=band.sum())
    x = np.fft.irfft(spectrum, n)
    x = x / (np.abs(x).max() + 1e-12) * 0.5
    x += noise * 0.05 * rng.normal(size=n)
    return np.clip(x, -1.0, 1.0)
