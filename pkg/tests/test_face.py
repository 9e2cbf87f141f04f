import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from userstate.face import (
    DegenerateAxisError, EYE_LEFT, EYE_RIGHT, MOUTH, NOSE_FOREMOST, UnalignableFrameError,
    align_clip, alignment_angles, alignment_matrix, alignment_residuals, normalize_clip,
    rotation_residuals, scale_frame,
)
from userstate.synth import face_template


def pose(roll=0.0, pitch=0.0, yaw=0.0):
    # intrinsic z-y-x: Rz(roll) @ Ry(yaw) @ Rx(pitch)
    return Rotation.from_euler("ZYX", [roll, yaw, pitch]).as_matrix()


def rotated(points, m):
    return points @ m.T


TEMPLATE = face_template()


def test_index_sets():
    assert len(NOSE_FOREMOST) == 3
    groups = [set(EYE_RIGHT), set(EYE_LEFT), set(MOUTH), set(NOSE_FOREMOST)]
    for i, a in enumerate(groups):
        for b in groups[i + 1:]:
            assert not a & b


def test_frontal_template_has_zero_angles():
    s = alignment_angles(TEMPLATE)
    np.testing.assert_allclose(s.as_array(), 0.0, atol=1e-12)


def test_recovers_known_roll():
    s = alignment_angles(rotated(TEMPLATE, pose(roll=0.2)))
    assert abs(s.roll - 0.2) < 1e-9
    assert abs(s.pitch) < 1e-9 and abs(s.yaw) < 1e-9


def test_composed_rotation_is_undone():
    frame = rotated(TEMPLATE, pose(roll=0.1, pitch=-0.2, yaw=0.3))
    s = alignment_angles(frame)
    np.testing.assert_allclose([s.roll, s.pitch, s.yaw], [0.1, -0.2, 0.3], atol=1e-9)
    aligned = rotated(frame, alignment_matrix(s))
    res = alignment_residuals(aligned)
    assert max(res.values()) < 1e-6


def test_angles_in_half_open_interval():
    for seed in range(20):
        m = Rotation.random(random_state=seed).as_matrix()
        s = alignment_angles(rotated(TEMPLATE, m))
        assert np.all(s.as_array() > -np.pi) and np.all(s.as_array() <= np.pi)


def test_degenerate_frame_is_reported_with_index():
    clip = np.stack([TEMPLATE] * 30)
    clip[7][list(EYE_LEFT)] = clip[7][list(EYE_RIGHT)]
    with pytest.raises(UnalignableFrameError, match="frame 7"):
        normalize_clip(clip)


def test_static_clip():
    clip = np.stack([TEMPLATE] * 30)
    out = normalize_clip(clip).frames
    np.testing.assert_allclose(out[0], scale_frame(TEMPLATE), atol=1e-12)
    for r in rotation_residuals(clip):
        np.testing.assert_allclose(r.as_array(), 0.0, atol=1e-12)


@pytest.mark.parametrize("mode", ["relative_to_first", "per_frame_delta"])
def test_constant_rotation_matches_static_clip(mode):
    m = pose(roll=0.4, pitch=0.3, yaw=-0.5)
    clip = np.stack([rotated(TEMPLATE, m)] * 30)
    static = normalize_clip(np.stack([TEMPLATE] * 30), mode).frames
    np.testing.assert_allclose(normalize_clip(clip, mode).frames, static, atol=1e-9)
    for r in rotation_residuals(clip, mode):
        np.testing.assert_allclose(r.as_array(), 0.0, atol=1e-9)


def test_linear_roll_residuals():
    clip = np.stack([rotated(TEMPLATE, pose(roll=0.01 * t)) for t in range(30)])
    rel = np.array([r.roll for r in rotation_residuals(clip, "relative_to_first")])
    delta = np.array([r.roll for r in rotation_residuals(clip, "per_frame_delta")])
    np.testing.assert_allclose(rel, 0.01 * np.arange(30), atol=1e-9)
    np.testing.assert_allclose(delta[1:], 0.01, atol=1e-9)
    assert abs(delta[0]) < 1e-9


def test_scale_identity_and_two_point_map():
    frame = np.random.default_rng(0).random((68, 3))
    frame[0] = 0.0
    frame[1] = 1.0
    np.testing.assert_allclose(scale_frame(frame), frame, atol=1e-12)
    f2 = np.random.default_rng(1).random((68, 3))
    f2[:, 0] = np.where(np.arange(68) % 2, 2.0, 4.0)
    assert set(np.unique(scale_frame(f2)[:, 0])) == {0.0, 1.0}
    assert np.all(scale_frame(f2)[f2[:, 0] == 4.0, 0] == 1.0)


def test_scale_rejects_flat_axis():
    frame = np.random.default_rng(0).random((68, 3))
    frame[:, 2] = 0.5
    with pytest.raises(DegenerateAxisError, match="z"):
        scale_frame(frame)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scale_frame_properties(seed):
    frame = np.random.default_rng(seed).normal(size=(68, 3)) * 10
    out = scale_frame(frame)
    assert np.all(out.min(axis=0) == 0.0) and np.all(out.max(axis=0) == 1.0)
    for axis in range(3):
        assert np.array_equal(np.argsort(frame[:, axis], kind="stable"), np.argsort(out[:, axis], kind="stable"))


def random_clip(rng, jitter=0.02):
    """Head motion plus nonrigid jitter; the first frame is a rotated canonical face."""
    angles = np.cumsum(rng.normal(scale=0.05, size=(30, 3)), axis=0)
    frames = [rotated(TEMPLATE, pose(*a)) for a in angles]
    frames = np.stack(frames)
    frames[1:] += jitter * rng.normal(size=frames[1:].shape)
    return rotated(frames, Rotation.random(random_state=rng.integers(2**31)).as_matrix())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["relative_to_first", "per_frame_delta"]))
def test_rotation_invariance(seed, mode):
    rng = np.random.default_rng(seed)
    clip = random_clip(rng)
    r = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    a = normalize_clip(clip, mode).frames
    b = normalize_clip(rotated(clip, r), mode).frames
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert a.min() >= 0.0 and a.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_first_frame_alignment(seed):
    clip = random_clip(np.random.default_rng(seed))
    aligned = align_clip(clip)
    assert max(alignment_residuals(aligned[0]).values()) < 1e-6
    # per-axis min-max scaling keeps shared coordinates shared
    assert max(alignment_residuals(normalize_clip(clip).frames[0]).values()) < 1e-6


def test_extremes_attained_per_frame_and_axis():
    out = normalize_clip(random_clip(np.random.default_rng(4))).frames
    assert np.all(out.min(axis=1) == 0.0) and np.all(out.max(axis=1) == 1.0)


def test_determinism():
    clip = random_clip(np.random.default_rng(5))
    a = normalize_clip(clip).frames
    b = normalize_clip(clip.copy()).frames
    assert a.tobytes() == b.tobytes()
