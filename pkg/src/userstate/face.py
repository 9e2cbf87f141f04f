"""Head-rotation normalization and per-frame scaling of 3D landmark clips.

Landmark indices follow the 68-point iBUG scheme (0-based):

    ==============  =================  =====================================
    set             indices            use
    ==============  =================  =====================================
    EYE_RIGHT       36-41              subject's right eye (image left)
    EYE_LEFT        42-47              subject's left eye
    MOUTH           48-67              outer and inner lip contour
    NOSE_FOREMOST   29, 30, 33         lower bridge, tip, base of columella
    ==============  =================  =====================================

Canonical orientation: the right-to-left eye vector points along +x, the
mouth lies below the eye midpoint (-y) and the nose points toward +z.

A head pose is written as ``P = Rz(roll) @ Ry(yaw) @ Rx(pitch)`` so that an
observed frame is ``P @ canonical``. Alignment applies ``P.T``: undo roll from
the eye line's xy direction, then yaw from its z difference, then pitch from
the eye-mean to mouth segment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_data import CLIP_FRAMES, NUM_LANDMARKS, LandmarkClip

EYE_RIGHT = tuple(range(36, 42))
EYE_LEFT = tuple(range(42, 48))
MOUTH = tuple(range(48, 68))
NOSE_FOREMOST = (29, 30, 33)
OTHER_THAN_NOSE = tuple(i for i in range(NUM_LANDMARKS) if i not in NOSE_FOREMOST)

MODES = ("relative_to_first", "per_frame_delta")
_EPS = 1e-12


class UnalignableFrameError(ValueError):
    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class DegenerateAxisError(ValueError):
    pass


def _wrap(angle: float) -> float:
    # map into (-pi, pi]
    a = float(np.arctan2(np.sin(angle), np.cos(angle)))
    return np.pi if a <= -np.pi else a


@dataclass(frozen=True)
class RotationState:
    roll: float
    pitch: float
    yaw: float

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, _wrap(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rot_z(roll) @ rot_y(yaw) @ rot_x(pitch)


def angles_from_matrix(m: np.ndarray) -> RotationState:
    """Decompose ``Rz(roll) @ Ry(yaw) @ Rx(pitch)`` into its angles."""
    yaw = np.arctan2(-m[2, 0], np.hypot(m[2, 1], m[2, 2]))
    pitch = np.arctan2(m[2, 1], m[2, 2])
    roll = np.arctan2(m[1, 0], m[0, 0])
    return RotationState(roll=roll, pitch=pitch, yaw=yaw)


def centroids(points: np.ndarray):
    """Return (right eye, left eye, mouth, nose-foremost, all-other) centroids."""
    p = np.asarray(points, dtype=np.float64)
    return (p[list(EYE_RIGHT)].mean(0), p[list(EYE_LEFT)].mean(0), p[list(MOUTH)].mean(0),
            p[list(NOSE_FOREMOST)].mean(0), p[list(OTHER_THAN_NOSE)].mean(0))


def alignment_angles(frame: np.ndarray, frame_index=None) -> RotationState:
    """Estimate the head pose whose inverse brings ``frame`` to canonical orientation."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (NUM_LANDMARKS, 3):
        raise ValueError(f"frame must be (68, 3), got {frame.shape}")
    eye_r, eye_l, mouth, _, _ = centroids(frame)
    eye_vec = eye_l - eye_r
    if np.linalg.norm(eye_vec) < _EPS:
        raise UnalignableFrameError("eye centroids coincide", frame_index)
    eye_mid = 0.5 * (eye_l + eye_r)
    if np.linalg.norm(mouth - eye_mid) < _EPS:
        raise UnalignableFrameError("eye midpoint and mouth centroid coincide", frame_index)

    roll = np.arctan2(eye_vec[1], eye_vec[0])
    v = rot_z(-roll) @ eye_vec
    yaw = np.arctan2(-v[2], v[0])
    undo = rot_y(-yaw) @ rot_z(-roll)
    w = undo @ (mouth - eye_mid)
    if np.hypot(w[1], w[2]) < _EPS:
        raise UnalignableFrameError("mouth lies on the eye line", frame_index)
    pitch = np.arctan2(-w[2], -w[1])
    return RotationState(roll=roll, pitch=pitch, yaw=yaw)


def alignment_matrix(state: RotationState) -> np.ndarray:
    """Rotation that undoes the pose described by ``state``."""
    return pose_matrix(state.roll, state.pitch, state.yaw).T


def rotate(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ matrix.T


def alignment_residuals(frame: np.ndarray) -> dict:
    """Distances measuring how far ``frame`` is from the three alignment targets.

    * ``eyes``: |dy|, |dz| between the eye centroids (x-axis alignment)
    * ``mouth``: |dx|, |dz| between eye midpoint and mouth centroid (y-axis)
    * ``nose``: |dx|, |dy| between nose-foremost and all-other centroids (z-axis)
    """
    eye_r, eye_l, mouth, nose, other = centroids(frame)
    eye_mid = 0.5 * (eye_r + eye_l)
    return {
        "eyes": float(max(abs(eye_l[1] - eye_r[1]), abs(eye_l[2] - eye_r[2]))),
        "mouth": float(max(abs(mouth[0] - eye_mid[0]), abs(mouth[2] - eye_mid[2]))),
        "nose": float(max(abs(nose[0] - other[0]), abs(nose[1] - other[1]))),
    }


def _frames_of(clip) -> np.ndarray:
    frames = clip.frames if isinstance(clip, LandmarkClip) else np.asarray(clip)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (NUM_LANDMARKS, 3):
        raise ValueError(f"clip must be (frames, 68, 3), got {frames.shape}")
    return frames


def _reference_rotations(frames: np.ndarray, mode: str) -> list[np.ndarray]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    aligns = [alignment_matrix(alignment_angles(f, frame_index=t)) for t, f in enumerate(frames)]
    if mode == "relative_to_first":
        return [aligns[0]] * len(frames)
    return [aligns[0]] + aligns[:-1]


def align_clip(clip, mode: str = "relative_to_first") -> np.ndarray:
    """Rotate every frame so the first is aligned and head motion is kept.

    In ``relative_to_first`` mode each frame is rotated by the first frame's
    alignment, so frame t keeps the motion accumulated since frame 1. In
    ``per_frame_delta`` mode frame t is rotated by frame t-1's alignment and
    keeps only the motion since the previous frame.
    """
    frames = _frames_of(clip)
    refs = _reference_rotations(frames, mode)
    return np.stack([rotate(f, r) for f, r in zip(frames, refs)])


def rotation_residuals(clip, mode: str = "relative_to_first") -> list[RotationState]:
    """Head rotation remaining in each frame of ``align_clip(clip, mode)``."""
    frames = _frames_of(clip)
    refs = _reference_rotations(frames, mode)
    out = []
    for t, (f, ref) in enumerate(zip(frames, refs)):
        own = alignment_matrix(alignment_angles(f, frame_index=t))
        out.append(angles_from_matrix(ref @ own.T))
    return out


def scale_frame(frame: np.ndarray) -> np.ndarray:
    """Min-max scale each axis of a (68, 3) frame independently onto [0, 1]."""
    frame = np.asarray(frame, dtype=np.float64)
    lo = frame.min(axis=0)
    hi = frame.max(axis=0)
    span = hi - lo
    if np.any(span <= 0):
        axes = [("x", "y", "z")[i] for i in np.flatnonzero(span <= 0)]
        raise DegenerateAxisError(f"zero range on axis {', '.join(axes)}: all points coplanar")
    out = (frame - lo) / span
    # exact extremes despite rounding
    out[frame == lo] = 0.0
    out[frame == hi] = 1.0
    return np.clip(out, 0.0, 1.0)


def normalize_clip(clip, mode: str = "relative_to_first") -> LandmarkClip:
    """Rotation-normalize and per-frame scale a 30-frame landmark clip."""
    frames = _frames_of(clip)
    if len(frames) != CLIP_FRAMES:
        raise ValueError(f"expected {CLIP_FRAMES} frames, got {len(frames)}")
    aligned = align_clip(frames, mode)
    scaled = np.stack([scale_frame(f) for f in aligned])
    return LandmarkClip(scaled, normalized=True)


def normalize_batch(clips: np.ndarray, mode: str = "relative_to_first") -> np.ndarray:
    return np.stack([normalize_clip(c, mode).frames for c in clips]).astype(np.float32)
