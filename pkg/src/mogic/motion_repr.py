"""Root-relative motion features and their inverse.

A frame of features is ``[yaw_vel, vel_x, vel_z, root_height, local joints]``:

* ``yaw_vel``: change of facing yaw between consecutive frames (rad/frame),
* ``vel_x, vel_z``: root XZ displacement to the next frame, expressed in the
  current frame's facing (m/frame),
* ``root_height``: root Y (m), or its per-frame change when
  ``height_mode="delta"``,
* 21 joints relative to the root, rotated so the facing points along +Z.

Y is up; facing is ``cross(up, right_hip - left_hip)`` projected on XZ.
A sequence of ``T`` frames yields ``T - 1`` feature rows.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_JOINTS = 22
LEFT_HIP, RIGHT_HIP = 1, 2
FEATURE_DIM = 1 + 2 + 1 + 3 * (N_JOINTS - 1)
MAX_SECONDS = 10.0
STD_FLOOR = 1e-6


class InsufficientFramesError(ValueError):
    pass


class MotionFormatError(ValueError):
    pass


@dataclass
class MotionSequence:
    fps: float
    frames: np.ndarray  # (T, 22, 3) global joint positions

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, J, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("joint positions must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats: list[np.ndarray] | np.ndarray) -> "FeatureStats":
        data = np.concatenate(list(feats), axis=0) if isinstance(feats, list) else np.asarray(feats)
        data = data.reshape(-1, data.shape[-1]).astype(np.float64)
        mean = data.mean(axis=0)
        std = np.maximum(data.std(axis=0), STD_FLOOR)
        return cls(mean.astype(np.float32), std.astype(np.float32))


def _rot_y(theta: np.ndarray) -> np.ndarray:
    """Rotation matrices about +Y taking +Z to (sin t, 0, cos t); shape (..., 3, 3)."""
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack(
        [np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)],
        axis=-2,
    )


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


def facing_yaw(frames: np.ndarray) -> np.ndarray:
    """Per-frame facing yaw from the hip axis; 0 means facing +Z."""
    across = frames[:, RIGHT_HIP] - frames[:, LEFT_HIP]
    # cross((0,1,0), across) = (across_z, 0, -across_x)
    fx, fz = across[:, 2], -across[:, 0]
    return np.arctan2(fx, fz)


def extract_features(seq: MotionSequence, height_mode: str = "absolute") -> np.ndarray:
    """Features for frames ``0..T-2``; shape ``(T - 1, 67)`` float32."""
    pos = seq.frames
    if pos.shape[0] < 2:
        raise InsufficientFramesError(f"need at least 2 frames, got {pos.shape[0]}")
    if pos.shape[1] != N_JOINTS:
        raise ValueError(f"expected {N_JOINTS} joints, got {pos.shape[1]}")
    if height_mode not in ("absolute", "delta"):
        raise ValueError(f"unknown height_mode {height_mode!r}")
    yaw = facing_yaw(pos)
    root = pos[:, 0]
    inv = _rot_y(-yaw[:-1])  # (T-1, 3, 3)

    yaw_vel = _wrap(yaw[1:] - yaw[:-1])
    disp = root[1:] - root[:-1]
    disp[:, 1] = 0.0
    vel_local = np.einsum("tij,tj->ti", inv, disp)
    if height_mode == "absolute":
        height = root[:-1, 1]
    else:
        height = root[1:, 1] - root[:-1, 1]
    rel = pos[:-1, 1:] - root[:-1, None, :]
    local = np.einsum("tij,tkj->tki", inv, rel)

    feats = np.concatenate(
        [
            yaw_vel[:, None],
            vel_local[:, [0, 2]],
            height[:, None],
            local.reshape(len(local), -1),
        ],
        axis=1,
    )
    return feats.astype(np.float32)


def reconstruct_positions(
    feats: np.ndarray,
    init_yaw: float = 0.0,
    init_xz: tuple[float, float] = (0.0, 0.0),
    fps: float = 30.0,
    height_mode: str = "absolute",
    init_height: float = 0.0,
) -> MotionSequence:
    """Integrate features back to global joints, one frame per feature row."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
        raise ValueError(f"features must be (T, {FEATURE_DIM}), got {f.shape}")
    n = f.shape[0]
    yaw = init_yaw + np.concatenate([[0.0], np.cumsum(f[:-1, 0])])
    rot = _rot_y(yaw)
    vel = np.zeros((n, 3))
    vel[:, 0], vel[:, 2] = f[:, 1], f[:, 2]
    step = np.einsum("tij,tj->ti", rot, vel)
    root = np.zeros((n, 3))
    root[:, 0] = init_xz[0] + np.concatenate([[0.0], np.cumsum(step[:-1, 0])])
    root[:, 2] = init_xz[1] + np.concatenate([[0.0], np.cumsum(step[:-1, 2])])
    if height_mode == "absolute":
        root[:, 1] = f[:, 3]
    else:
        root[:, 1] = init_height + np.concatenate([[0.0], np.cumsum(f[:-1, 3])])
    local = f[:, 4:].reshape(n, N_JOINTS - 1, 3)
    joints = np.einsum("tij,tkj->tki", rot, local) + root[:, None, :]
    frames = np.concatenate([root[:, None, :], joints], axis=1)
    return MotionSequence(fps=fps, frames=frames)


def resample(
    seq: MotionSequence, target_fps: float, max_seconds: float | None = MAX_SECONDS
) -> MotionSequence:
    """Linear interpolation onto a uniform grid, truncated at ``max_seconds``."""
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    if target_fps == seq.fps and (
        max_seconds is None or seq.n_frames <= round(max_seconds * target_fps)
    ):
        return MotionSequence(fps=seq.fps, frames=seq.frames.copy())
    src_t = np.arange(seq.n_frames) / seq.fps
    # small slack so an exact multiple of the new period is not lost to rounding
    n_out = int(np.floor(seq.duration * target_fps + 1e-9)) + 1
    if max_seconds is not None:
        n_out = min(n_out, int(round(max_seconds * target_fps)))
    dst_t = np.arange(n_out) / target_fps
    flat = seq.frames.reshape(seq.n_frames, -1)
    out = np.stack([np.interp(dst_t, src_t, flat[:, k]) for k in range(flat.shape[1])], axis=1)
    return MotionSequence(fps=target_fps, frames=out.reshape(n_out, *seq.frames.shape[1:]))


def normalize(feats: np.ndarray, stats: FeatureStats) -> np.ndarray:
    if feats.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"feature dim {feats.shape[-1]} != stats dim {stats.mean.shape[0]}")
    return ((feats - stats.mean) / stats.std).astype(np.float32)


def denormalize(feats: np.ndarray, stats: FeatureStats) -> np.ndarray:
    if feats.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"feature dim {feats.shape[-1]} != stats dim {stats.mean.shape[0]}")
    return (feats * stats.std + stats.mean).astype(np.float32)


# -- binary formats -----------------------------------------------------------
# MOF1: "MOF1", u32 fps, u32 T, u32 J, then T*J*3 f32 (little-endian)
# MFF1: "MFF1", u32 fps, u32 T, u32 D, then T*D f32

def _write(path: Path | str, magic: bytes, fps: float, arr: np.ndarray, width: int) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = magic + struct.pack("<III", int(round(fps)), arr.shape[0], width)
    Path(path).write_bytes(header + arr.tobytes())


def _read(path: Path | str, magic: bytes) -> tuple[int, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != magic:
        raise MotionFormatError(f"{path}: not a {magic.decode()} file")
    fps, t, j = struct.unpack("<III", raw[4:16])
    width = j * 3 if magic == b"MOF1" else j
    expected = 16 + 4 * t * width
    if len(raw) != expected:
        raise MotionFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(t, width)
    return fps, data


def save_motion(path: Path | str, seq: MotionSequence) -> None:
    _write(path, b"MOF1", seq.fps, seq.frames.reshape(seq.n_frames, -1), seq.frames.shape[1])


def load_motion(path: Path | str) -> MotionSequence:
    fps, data = _read(path, b"MOF1")
    return MotionSequence(fps=float(fps), frames=data.reshape(data.shape[0], -1, 3))


def save_features(path: Path | str, feats: np.ndarray, fps: float = 30.0) -> None:
    _write(path, b"MFF1", fps, feats, feats.shape[1])


def load_features(path: Path | str) -> tuple[float, np.ndarray]:
    fps, data = _read(path, b"MFF1")
    return float(fps), data.astype(np.float32)
