import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mogic.motion_repr import (
    FEATURE_DIM,
    FeatureStats,
    InsufficientFramesError,
    MotionFormatError,
    MotionSequence,
    denormalize,
    extract_features,
    facing_yaw,
    load_features,
    load_motion,
    normalize,
    reconstruct_positions,
    resample,
    save_features,
    save_motion,
)
from mogic.synthdata import REST, PELVIS_HEIGHT, generate_sample


def _standing(T=30):
    pose = REST + np.array([0.0, PELVIS_HEIGHT, 0.0])
    return MotionSequence(30.0, np.repeat(pose[None], T, axis=0))


def _rotate_y(frames, theta):
    c, s = np.cos(theta), np.sin(theta)
    r = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return frames @ r.T


def test_feature_dim():
    assert FEATURE_DIM == 67


def test_stationary_pose_features():
    f = extract_features(_standing())
    assert f.shape == (29, 67)
    assert np.all(f[:, 0] == 0) and np.all(f[:, 1:3] == 0)
    assert np.allclose(f[:, 3], f[0, 3])
    assert np.allclose(f[:, 4:], f[0, 4:])


def test_pure_forward_translation():
    seq = _standing(31)
    frames = seq.frames.copy()
    frames[:, :, 2] += np.arange(31)[:, None] / 30.0  # 1 m/s along +Z
    f = extract_features(MotionSequence(30.0, frames))
    assert np.allclose(f[:, 0], 0, atol=1e-7)
    assert np.allclose(f[:, 1], 0, atol=1e-7)
    assert np.allclose(f[:, 2], 1 / 30, atol=1e-7)


def test_pure_yaw_rotation():
    omega = 0.9
    base = _standing(31).frames
    frames = np.stack([_rotate_y(base[t], omega * t / 30) for t in range(31)])
    f = extract_features(MotionSequence(30.0, frames))
    assert np.allclose(f[:, 0], omega / 30, atol=1e-6)
    assert np.allclose(f[:, 1:3], 0, atol=1e-7)


def test_insufficient_frames():
    with pytest.raises(InsufficientFramesError):
        extract_features(_standing(1))


def test_roundtrip_stationary_exact_and_zero_features():
    seq = _standing()
    f = extract_features(seq)
    rec = reconstruct_positions(f, init_yaw=0.0, init_xz=(0.0, 0.0))
    assert np.abs(rec.frames - seq.frames[:-1]).max() < 1e-6
    z = reconstruct_positions(np.zeros((5, 67)), init_yaw=0.3, init_xz=(1.0, 2.0))
    assert np.allclose(z.frames, z.frames[:1])


@pytest.mark.parametrize("seed", range(10))
def test_roundtrip_synthetic(seed):
    s = generate_sample(seed)
    f = extract_features(s.motion)
    yaw0 = facing_yaw(s.motion.frames[:1])[0]
    root0 = s.motion.frames[0, 0]
    rec = reconstruct_positions(f, yaw0, (root0[0], root0[2]))
    assert np.abs(rec.frames - s.motion.frames[:-1]).max() < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.floats(-np.pi, np.pi), st.integers(0, 10_000))
def test_yaw_invariance(theta, seed):
    s = generate_sample(seed, duration_range=(2.0, 3.0))
    f0 = extract_features(s.motion)
    f1 = extract_features(MotionSequence(30.0, _rotate_y(s.motion.frames, theta)))
    assert np.abs(f0 - f1).max() < 1e-5


def test_delta_height_mode_roundtrip():
    s = generate_sample(3)
    f = extract_features(s.motion, height_mode="delta")
    r0 = s.motion.frames[0, 0]
    rec = reconstruct_positions(
        f, facing_yaw(s.motion.frames[:1])[0], (r0[0], r0[2]), height_mode="delta", init_height=r0[1]
    )
    assert np.abs(rec.frames - s.motion.frames[:-1]).max() < 1e-4


def test_resample():
    seq = generate_sample(1).motion
    same = resample(seq, 30.0)
    assert np.array_equal(same.frames, seq.frames)
    frames60 = np.repeat(seq.frames, 2, axis=0)[:-1]
    half = resample(MotionSequence(60.0, frames60), 30.0)
    assert abs(half.n_frames - len(frames60) / 2) <= 1
    long = MotionSequence(30.0, np.zeros((360, 22, 3)))
    assert resample(long, 30.0).n_frames == 300


def test_resample_duration_preserved():
    seq = generate_sample(2).motion
    out = resample(seq, 20.0)
    assert abs(out.duration - seq.duration) <= 1 / 20.0


def test_normalize_roundtrip_and_floor():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 67)).astype(np.float32)
    x[:, 5] = 2.0
    stats = FeatureStats.fit([x])
    assert stats.std.min() >= 1e-6
    n = normalize(x, stats)
    assert np.all(np.isfinite(n)) and np.all(n[:, 5] == 0)
    assert np.allclose(normalize(stats.mean[None], stats), 0)
    assert np.abs(denormalize(n, stats) - x).max() < 1e-6
    with pytest.raises(ValueError):
        normalize(np.zeros((2, 3)), stats)


def test_file_formats(tmp_path):
    seq = generate_sample(4).motion
    save_motion(tmp_path / "a.mof", seq)
    back = load_motion(tmp_path / "a.mof")
    assert back.fps == 30 and np.allclose(back.frames, seq.frames, atol=1e-6)
    raw = (tmp_path / "a.mof").read_bytes()
    assert raw[:4] == b"MOF1" and int.from_bytes(raw[12:16], "little") == 22
    f = extract_features(seq)
    save_features(tmp_path / "a.mff", f)
    fps, back_f = load_features(tmp_path / "a.mff")
    assert fps == 30 and np.array_equal(back_f, f)
    (tmp_path / "bad.mof").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MotionFormatError):
        load_motion(tmp_path / "bad.mof")
