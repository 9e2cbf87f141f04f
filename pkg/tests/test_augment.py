import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from userstate.augment import (
    ALL_OPS, EXCLUDED_OPS, AugmentPolicy, apply_op, max_weak_shift, strong_augment, translate,
    weak_augment,
)


def test_max_weak_shift():
    assert max_weak_shift(30) == 4
    assert max_weak_shift(68) == 10
    assert max_weak_shift(6) == 0


def test_zero_shift_is_identity():
    x = np.random.default_rng(0).random((30, 68, 3)).astype(np.float32)
    assert np.array_equal(translate(x, (0, 0)), x)


def test_translation_zero_fills():
    x = np.ones((30, 50, 1), dtype=np.float32)
    out = translate(x, (3, -2))
    assert np.all(out[:3] == 0) and np.all(out[:, -2:] == 0)
    assert np.all(out[3:, :-2] == 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weak_shift_bounded(seed):
    x = np.zeros((30, 50, 1), dtype=np.float32)
    x[15, 25] = 1.0
    out = weak_augment(x, np.random.default_rng(seed))
    t, f, _ = np.argwhere(out == 1.0)[0]
    assert abs(t - 15) <= 4 and abs(f - 25) <= 7


def test_weak_never_flips():
    x = np.arange(30 * 50, dtype=np.float32).reshape(30, 50, 1)
    for seed in range(30):
        out = weak_augment(x, np.random.default_rng(seed))
        nz = out[..., 0][out[..., 0] != 0]
        assert np.all(np.diff(nz.reshape(-1)) > 0)


def test_seed_determinism():
    x = np.random.default_rng(1).random((30, 68, 3)).astype(np.float32)
    pol = AugmentPolicy.for_landmarks()
    a = strong_augment(x, np.random.default_rng(7), pol)
    b = strong_augment(x, np.random.default_rng(7), pol)
    assert a.tobytes() == b.tobytes()


def test_n_zero_is_identity():
    x = np.random.default_rng(2).random((30, 50, 1)).astype(np.float32)
    out = strong_augment(x, np.random.default_rng(0), AugmentPolicy(n=0))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("op", sorted(EXCLUDED_OPS))
def test_excluded_ops_rejected(op):
    with pytest.raises(ValueError):
        AugmentPolicy(ops=("identity", op))


def test_default_policy_has_no_excluded_ops():
    assert not EXCLUDED_OPS & set(AugmentPolicy().ops)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10))
def test_landmark_outputs_stay_in_unit_range(seed, m):
    rng = np.random.default_rng(seed)
    x = rng.random((30, 68, 3)).astype(np.float32)
    out = strong_augment(x, rng, AugmentPolicy.for_landmarks(m=m))
    assert out.shape == x.shape and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("op", ALL_OPS)
def test_every_op_preserves_shape(op):
    x = np.random.default_rng(3).normal(size=(30, 50, 1)).astype(np.float32)
    out = apply_op(op, x, 1.0, np.random.default_rng(0))
    assert out.shape == x.shape and np.all(np.isfinite(out))
