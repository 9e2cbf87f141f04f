"""Weak and strong augmentations for landmark and latent clips.

Both operate on channels-last arrays of shape (T, F, C). Image colour ops of
the RandAugment family are mapped onto elementwise tensor transforms:

    ====================  =============================================
    op                    tensor transform
    ====================  =============================================
    identity              no-op
    translate_x           shift along the time axis, zero fill
    translate_y           shift along the feature axis, zero fill
    cutout                zero a random rectangle on (T, F)
    value_scale           contrast: scale deviations from the mean
    value_shift           brightness: add an offset of the value range
    sharpen_1d            unsharp mask along time (3-tap box blur)
    solarize_threshold    reflect values above a threshold
    posterize_quantize    quantize the value range to 2**bits levels
    autocontrast_rescale  per-channel min-max stretch to the global range
    equalize_histogram    per-channel rank transform to the global range
    ====================  =============================================

Shear and rotation are never part of a policy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALL_OPS = (
    "identity", "translate_x", "translate_y", "cutout", "value_scale", "value_shift",
    "sharpen_1d", "solarize_threshold", "posterize_quantize", "autocontrast_rescale",
    "equalize_histogram",
)
EXCLUDED_OPS = frozenset({"shear_x", "shear_y", "rotate"})
MAX_LEVEL = 10
WEAK_FRACTION = 0.15


def _shift(x: np.ndarray, shift: int, axis: int, fill: str) -> np.ndarray:
    if shift == 0:
        return x.copy()
    out = np.roll(x, shift, axis=axis)
    idx = [slice(None)] * x.ndim
    if shift > 0:
        idx[axis] = slice(0, shift)
        src = [slice(None)] * x.ndim
        src[axis] = slice(0, 1)
    else:
        idx[axis] = slice(shift, None)
        src = [slice(None)] * x.ndim
        src[axis] = slice(-1, None)
    if fill == "edge":
        out[tuple(idx)] = x[tuple(src)]
    else:
        out[tuple(idx)] = 0.0
    return out


def max_weak_shift(dim: int, fraction: float = WEAK_FRACTION) -> int:
    # rounded toward zero
    return int(fraction * dim)


def translate(x: np.ndarray, shifts, fill: str = "zero") -> np.ndarray:
    out = np.asarray(x)
    for axis, s in enumerate(shifts):
        out = _shift(out, int(s), axis, fill)
    return out


def weak_augment(x: np.ndarray, rng: np.random.Generator, fill: str = "zero",
                 fraction: float = WEAK_FRACTION) -> np.ndarray:
    """Random integer translation along the two leading axes; never flips."""
    x = np.asarray(x, dtype=np.float32)
    shifts = [int(rng.integers(-max_weak_shift(d, fraction), max_weak_shift(d, fraction) + 1))
              for d in x.shape[:2]]
    return translate(x, shifts, fill)


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple = ALL_OPS
    n: int = 2
    m: int = 10
    fill: str = "zero"
    value_range: tuple | None = None   # clamp outputs, e.g. (0, 1) for landmark clips

    def __post_init__(self):
        banned = EXCLUDED_OPS.intersection(self.ops)
        if banned:
            raise ValueError(f"policy may not contain {sorted(banned)}")
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if not self.ops:
            raise ValueError("policy needs at least one op")
        if self.n < 0 or not 0 <= self.m <= MAX_LEVEL:
            raise ValueError("need n >= 0 and 0 <= m <= 10")
        if self.fill not in ("zero", "edge"):
            raise ValueError("fill must be 'zero' or 'edge'")

    @classmethod
    def for_landmarks(cls, **kw):
        return cls(value_range=(0.0, 1.0), **kw)

    def sample_ops(self, rng: np.random.Generator) -> list[str]:
        return [self.ops[i] for i in rng.integers(0, len(self.ops), size=self.n)]


def _range(x):
    lo, hi = float(x.min()), float(x.max())
    return lo, hi


def _sign(rng):
    return 1.0 if rng.random() < 0.5 else -1.0


def apply_op(name: str, x: np.ndarray, level: float, rng: np.random.Generator, fill: str = "zero") -> np.ndarray:
    """Apply one op at ``level`` in [0, 1] (the policy magnitude over 10)."""
    x = np.asarray(x, dtype=np.float32)
    lo, hi = _range(x)
    span = hi - lo
    if name == "identity":
        return x.copy()
    if name == "translate_x":
        s = int(round(level * 0.3 * x.shape[0] * _sign(rng)))
        return _shift(x, s, 0, fill)
    if name == "translate_y":
        s = int(round(level * 0.3 * x.shape[1] * _sign(rng)))
        return _shift(x, s, 1, fill)
    if name == "cutout":
        out = x.copy()
        h = max(1, int(round(level * 0.5 * x.shape[0])))
        w = max(1, int(round(level * 0.5 * x.shape[1])))
        t0 = int(rng.integers(0, x.shape[0] - h + 1))
        f0 = int(rng.integers(0, x.shape[1] - w + 1))
        out[t0:t0 + h, f0:f0 + w] = 0.0
        return out
    if name == "value_scale":
        factor = 1.0 + 0.9 * level * _sign(rng)
        mean = x.mean()
        return ((x - mean) * factor + mean).astype(np.float32)
    if name == "value_shift":
        return (x + 0.3 * level * span * _sign(rng)).astype(np.float32)
    if name == "sharpen_1d":
        padded = np.pad(x, [(1, 1)] + [(0, 0)] * (x.ndim - 1), mode="edge")
        blur = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
        return (x + level * (x - blur)).astype(np.float32)
    if name == "solarize_threshold":
        threshold = hi - level * span
        return np.where(x >= threshold, lo + hi - x, x).astype(np.float32)
    if name == "posterize_quantize":
        if span == 0:
            return x.copy()
        levels = 2 ** max(1, 8 - int(round(4 * level)))
        q = np.floor((x - lo) / span * (levels - 1) + 0.5) / (levels - 1)
        return (lo + q * span).astype(np.float32)
    if name == "autocontrast_rescale":
        out = x.copy()
        for c in range(x.shape[-1]):
            cl, ch = x[..., c].min(), x[..., c].max()
            if ch > cl:
                out[..., c] = lo + (x[..., c] - cl) / (ch - cl) * span
        return out
    if name == "equalize_histogram":
        out = x.copy()
        for c in range(x.shape[-1]):
            v = x[..., c].reshape(-1)
            if v.size > 1 and v.max() > v.min():
                ranks = np.argsort(np.argsort(v, kind="stable"), kind="stable")
                out[..., c] = (lo + ranks / (v.size - 1) * span).reshape(x.shape[:-1])
        return out
    raise ValueError(f"unknown op {name!r}")


def strong_augment(x: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Apply ``policy.n`` uniformly sampled ops in order at magnitude ``policy.m``."""
    out = np.asarray(x, dtype=np.float32).copy()
    level = policy.m / MAX_LEVEL
    for name in policy.sample_ops(rng):
        out = apply_op(name, out, level, rng, policy.fill)
    if policy.value_range is not None:
        out = np.clip(out, *policy.value_range)
    return out


def augment_batch(batch: np.ndarray, rng: np.random.Generator, fn, **kw) -> np.ndarray:
    return np.stack([fn(x, rng, **kw) for x in batch]).astype(np.float32)
