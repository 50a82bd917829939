"""Procedural two-phase motion / caption / vision corpus.

Each sample chains two motion primitives on a fixed 22-joint skeleton. The
root trajectory is continuous across the join and every primitive starts and
ends in the rest pose, so the whole clip is C0. Captions name both phases in
temporal order; vision descriptors sample the ground truth once per second.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion_repr import MotionSequence, load_motion, save_motion

FPS = 30.0
VISION_DIM = 8
MAX_VISION_FRAMES = 10

KINDS = (
    "walk_forward",
    "turn_left",
    "turn_right",
    "walk_circle",
    "raise_arm",
    "squat",
    "reach_object",
    "idle",
)

PHRASES: dict[str, tuple[str, ...]] = {
    "walk_forward": ("walks forward", "moves ahead", "walks straight ahead"),
    "turn_left": ("turns left", "turns to the left", "rotates to the left"),
    "turn_right": ("turns right", "turns to the right", "rotates to the right"),
    "walk_circle": ("walks in a circle", "circles around", "walks around in a loop"),
    "raise_arm": ("raises an arm", "lifts an arm up", "puts a hand up"),
    "squat": ("squats down", "crouches", "does a squat"),
    "reach_object": ("reaches for an object", "picks up an object", "grabs something"),
    "idle": ("stands still", "waits in place", "stays idle"),
}
SUBJECTS = ("a person", "someone", "the person")
CONNECTORS = ("then", "and then", "after that")

# SMPL-style joint order
JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
PELVIS_HEIGHT = 0.95
# rest offsets from the pelvis, body frame: +Z forward, +X left, +Y up
REST = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.09, -0.06, 0.0], [-0.09, -0.06, 0.0], [0.0, 0.10, -0.01],
        [0.10, -0.48, 0.01], [-0.10, -0.48, 0.01], [0.0, 0.24, -0.01],
        [0.10, -0.88, -0.02], [-0.10, -0.88, -0.02], [0.0, 0.30, 0.0],
        [0.11, -0.93, 0.10], [-0.11, -0.93, 0.10], [0.0, 0.50, 0.0],
        [0.07, 0.44, 0.0], [-0.07, 0.44, 0.0], [0.0, 0.62, 0.03],
        [0.18, 0.45, 0.0], [-0.18, 0.45, 0.0], [0.22, 0.19, 0.0],
        [-0.22, 0.19, 0.0], [0.24, -0.05, 0.02], [-0.24, -0.05, 0.02],
    ]
)
LEFT_LEG, RIGHT_LEG = (4, 7, 10), (5, 8, 11)
LEFT_SHIN, RIGHT_SHIN = (7, 10), (8, 11)
LEFT_ARM, RIGHT_ARM = (18, 20), (19, 21)
UPPER_BODY = (3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21)


class GeneratorError(ValueError):
    pass


@dataclass
class Primitive:
    kind: str
    duration: float
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise GeneratorError(f"unknown primitive {self.kind!r}")
        if not 1.0 <= self.duration <= 6.0:
            raise GeneratorError(f"duration {self.duration} outside [1, 6] s")


@dataclass
class Sample:
    motion: MotionSequence
    caption: str
    phase_split: int
    vision: np.ndarray  # (p, 8)
    seed: int
    primitives: tuple[Primitive, Primitive]
    object_xz: tuple[float, float] | None = None


# -- pose helpers -------------------------------------------------------------

def _rot(axis: str, angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(c), np.ones_like(c)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    else:
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def _rotate_about(pose: np.ndarray, joints, pivot: int, rot: np.ndarray) -> None:
    """In place: rotate ``joints`` of every frame about joint ``pivot``."""
    idx = list(joints)
    p = pose[:, pivot : pivot + 1, :]
    pose[:, idx] = np.einsum("tij,tkj->tki", rot, pose[:, idx] - p) + p


def _bump(u: np.ndarray) -> np.ndarray:
    """0 -> 1 -> 0 smooth window on u in [0, 1]."""
    return np.sin(np.pi * np.clip(u, 0.0, 1.0)) ** 2


def _ramp(tau: np.ndarray, d: float, edge: float = 0.25) -> np.ndarray:
    return np.clip(np.minimum(tau, d - tau) / edge, 0.0, 1.0)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _gait(pose: np.ndarray, phase: np.ndarray, amp: np.ndarray) -> None:
    swing = 0.45 * amp * np.sin(phase)
    _rotate_about(pose, LEFT_LEG, 1, _rot("x", -swing))
    _rotate_about(pose, RIGHT_LEG, 2, _rot("x", swing))
    lk = 0.6 * amp * np.maximum(0.0, np.sin(phase))
    rk = 0.6 * amp * np.maximum(0.0, -np.sin(phase))
    _rotate_about(pose, LEFT_SHIN, 4, _rot("x", lk))
    _rotate_about(pose, RIGHT_SHIN, 5, _rot("x", rk))
    _rotate_about(pose, LEFT_ARM, 16, _rot("x", 0.35 * amp * np.sin(phase)))
    _rotate_about(pose, RIGHT_ARM, 17, _rot("x", -0.35 * amp * np.sin(phase)))


def _primitive_track(prim: Primitive, n: int, fps: float, rng: np.random.Generator):
    """Local-frame trajectory of one primitive over ``n + 1`` frames.

    Returns ``(yaw, disp, height, pose, obj)`` where ``yaw`` and ``disp`` are
    relative to the primitive's start (disp in the start facing frame) and
    ``pose`` holds body-frame joint offsets from the root.
    """
    d = n / fps
    tau = np.arange(n + 1) / fps
    u = tau / d
    yaw = np.zeros(n + 1)
    disp = np.zeros((n + 1, 2))  # (x, z)
    height = np.full(n + 1, PELVIS_HEIGHT)
    pose = np.repeat(REST[None], n + 1, axis=0).copy()
    obj = None
    p = prim.params
    k = prim.kind

    if k == "walk_forward":
        disp[:, 1] = p["speed"] * tau
        amp = _ramp(tau, d)
        phase = 2 * np.pi * p["cadence"] * tau
        _gait(pose, phase, amp)
        height += 0.015 * amp * np.abs(np.sin(phase))
    elif k in ("turn_left", "turn_right"):
        sign = 1.0 if k == "turn_left" else -1.0
        yaw = sign * p["angle"] * _smoothstep(u)
        amp = 0.4 * _ramp(tau, d)
        _gait(pose, 2 * np.pi * 1.6 * tau, amp)
    elif k == "walk_circle":
        omega = p["speed"] / p["radius"]
        yaw = omega * tau
        # integrate heading; closed form for constant speed along an arc
        disp[:, 0] = p["radius"] * (1 - np.cos(yaw))
        disp[:, 1] = p["radius"] * np.sin(yaw)
        amp = _ramp(tau, d)
        _gait(pose, 2 * np.pi * p["cadence"] * tau, amp)
    elif k == "raise_arm":
        w = _bump(u)
        _rotate_about(pose, RIGHT_ARM, 17, _rot("x", -p["angle"] * w))
    elif k == "squat":
        w = _bump(u)
        leg = 0.88
        drop = p["depth"] * w
        theta = np.arccos(np.clip(1 - drop / leg, -1, 1))
        height -= drop
        _rotate_about(pose, LEFT_LEG, 1, _rot("x", -theta))
        _rotate_about(pose, RIGHT_LEG, 2, _rot("x", -theta))
        _rotate_about(pose, LEFT_SHIN, 4, _rot("x", 2 * theta))
        _rotate_about(pose, RIGHT_SHIN, 5, _rot("x", 2 * theta))
        _rotate_about(pose, UPPER_BODY, 0, _rot("x", -0.5 * theta))
    elif k == "reach_object":
        w = _bump(u)
        lateral, forward = p["object"]
        obj = (lateral, forward)
        aim = math.atan2(lateral, forward)
        _rotate_about(pose, UPPER_BODY, 0, _rot("x", -0.5 * w))
        _rotate_about(pose, RIGHT_ARM, 17, _rot("y", aim * w))
        _rotate_about(pose, RIGHT_ARM, 17, _rot("x", -1.3 * w))
        height -= 0.12 * w
    elif k == "idle":
        sway = p["sway"] * np.sin(2 * np.pi * 0.5 * tau) * _ramp(tau, d, 0.5)
        disp[:, 0] = sway
    return yaw, disp, height, pose, obj


def _sample_params(kind: str, rng: np.random.Generator) -> dict:
    if kind == "walk_forward":
        return {"speed": float(rng.uniform(0.6, 1.6)), "cadence": float(rng.uniform(1.6, 2.2))}
    if kind in ("turn_left", "turn_right"):
        return {"angle": float(rng.uniform(math.pi / 4, math.pi))}
    if kind == "walk_circle":
        return {
            "speed": float(rng.uniform(0.6, 1.2)),
            "radius": float(rng.uniform(0.8, 2.0)),
            "cadence": float(rng.uniform(1.6, 2.2)),
        }
    if kind == "raise_arm":
        return {"angle": float(rng.uniform(2.2, 3.0))}
    if kind == "squat":
        return {"depth": float(rng.uniform(0.2, 0.45))}
    if kind == "reach_object":
        return {"object": (float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0.4, 0.7)))}
    return {"sway": float(rng.uniform(0.0, 0.02))}


def compose(
    first: Primitive, second: Primitive, fps: float = FPS, rng: np.random.Generator | None = None
) -> tuple[MotionSequence, int, tuple[float, float] | None]:
    """Chain two primitives from the origin facing +Z.

    Returns the motion, the frame index where the second primitive starts and
    the world XZ of the manipulated object, if any.
    """
    rng = rng or np.random.default_rng(0)
    n1 = int(round(first.duration * fps))
    n2 = int(round(second.duration * fps))
    tracks = [_primitive_track(first, n1, fps, rng), _primitive_track(second, n2, fps, rng)]

    yaws, roots, poses = [], [], []
    yaw0, xz0 = 0.0, np.zeros(2)
    obj_world = None
    for i, (yaw, disp, height, pose, obj) in enumerate(tracks):
        c, s = math.cos(yaw0), math.sin(yaw0)
        # start-facing frame -> world: x' = c x + s z, z' = -s x + c z
        wx = xz0[0] + c * disp[:, 0] + s * disp[:, 1]
        wz = xz0[1] - s * disp[:, 0] + c * disp[:, 1]
        root = np.stack([wx, height, wz], axis=1)
        sl = slice(0, None) if i == 0 else slice(1, None)
        yaws.append(yaw0 + yaw[sl])
        roots.append(root[sl])
        poses.append(pose[sl])
        if obj is not None:
            ow = (xz0[0] + c * obj[0] + s * obj[1], xz0[1] - s * obj[0] + c * obj[1])
            obj_world = (float(ow[0]), float(ow[1]))
        yaw0 = float(yaw0 + yaw[-1])
        xz0 = np.array([wx[-1], wz[-1]])

    yaw = np.concatenate(yaws)
    root = np.concatenate(roots)
    pose = np.concatenate(poses)
    rot = _rot("y", yaw)
    frames = np.einsum("tij,tkj->tki", rot, pose) + root[:, None, :]
    return MotionSequence(fps=fps, frames=frames), n1, obj_world


def vision_descriptors(
    motion: MotionSequence, object_xz: tuple[float, float] | None
) -> np.ndarray:
    """One 8-d descriptor per second: root xz, sin/cos yaw, anchor xz, extent, object flag."""
    from .motion_repr import facing_yaw

    p = min(MAX_VISION_FRAMES, int(math.floor(motion.duration + 1e-9)) + 1)
    idx = [min(int(round(k * motion.fps)), motion.n_frames - 1) for k in range(p)]
    fr = motion.frames[idx]
    yaw = facing_yaw(fr)
    root = fr[:, 0]
    if object_xz is None:
        anchor = np.repeat(motion.frames[:1, 0, [0, 2]], p, axis=0)
        flag = np.zeros(p)
    else:
        anchor = np.tile(np.asarray(object_xz), (p, 1))
        flag = np.ones(p)
    extent = fr[:, :, 1].max(axis=1) - fr[:, :, 1].min(axis=1)
    desc = np.column_stack(
        [root[:, 0], root[:, 2], np.sin(yaw), np.cos(yaw), anchor, extent, flag]
    )
    return desc.astype(np.float32)


def make_caption(first: str, second: str, rng: np.random.Generator) -> str:
    subj = SUBJECTS[rng.integers(len(SUBJECTS))]
    c1 = PHRASES[first][rng.integers(len(PHRASES[first]))]
    conn = CONNECTORS[rng.integers(len(CONNECTORS))]
    c2 = PHRASES[second][rng.integers(len(PHRASES[second]))]
    return f"{subj} {c1} {conn} {c2}"


def match_clauses(seq, phrase_table: dict[str, list]) -> list[str]:
    """Kinds whose phrase (a token sequence) occurs in ``seq``, in order.

    Overlapping hits resolve to the earliest start, then the longest phrase.
    Works on words or on token ids alike.
    """
    seq = list(seq)
    hits = []
    for kind, phrases in phrase_table.items():
        for pw in phrases:
            pw = list(pw)
            for i in range(len(seq) - len(pw) + 1):
                if seq[i : i + len(pw)] == pw:
                    hits.append((i, -len(pw), kind))
    hits.sort()
    out, last_end = [], -1
    for i, neg_len, kind in hits:
        if i >= last_end:
            out.append(kind)
            last_end = i - neg_len
    return out


def parse_clauses(text: str) -> list[str]:
    """Primitive kinds named in ``text``, in order of appearance."""
    table = {k: [ph.split() for ph in v] for k, v in PHRASES.items()}
    return match_clauses(text.lower().split(), table)


def vocabulary() -> list[str]:
    """Every word the caption templates can produce, sorted."""
    words = {w for v in PHRASES.values() for ph in v for w in ph.split()}
    words |= {w for s in SUBJECTS + CONNECTORS for w in s.split()}
    return sorted(words)


def continuations(first: str) -> tuple[str, ...]:
    """Every kind may follow every other kind, uniformly."""
    return tuple(k for k in KINDS if k != first)


def generate_sample(
    seed: int,
    duration_range: tuple[float, float] = (3.0, 8.0),
    kinds: tuple[str, str] | None = None,
    split_fraction: float | None = None,
) -> Sample:
    rng = np.random.default_rng(seed)
    first = KINDS[rng.integers(len(KINDS))]
    cont = continuations(first)
    second = cont[rng.integers(len(cont))]
    if kinds is not None:
        first, second = kinds
        if first not in KINDS or second not in KINDS:
            raise GeneratorError(f"unknown primitive pair {kinds}")
    total = float(rng.uniform(*duration_range))
    frac = float(rng.uniform(0.3, 0.7)) if split_fraction is None else split_fraction
    d1 = min(max(total * frac, 1.0), 6.0)
    d2 = min(max(total - d1, 1.0), 6.0)
    p1 = Primitive(first, d1, _sample_params(first, rng))
    p2 = Primitive(second, d2, _sample_params(second, rng))
    motion, split, obj = compose(p1, p2, FPS, rng)
    caption = make_caption(first, second, rng)
    return Sample(
        motion=motion,
        caption=caption,
        phase_split=split,
        vision=vision_descriptors(motion, obj),
        seed=seed,
        primitives=(p1, p2),
        object_xz=obj,
    )


def _split_order(ids: list[str], seed: int) -> list[str]:
    key = lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest()
    return sorted(ids, key=key)


def build_corpus(
    n: int,
    out_dir: Path | str,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    duration_range: tuple[float, float] = (3.0, 8.0),
) -> Path:
    """Write ``n`` samples as MOF1 files plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    ids = [f"s{i:06d}" for i in range(n)]
    order = _split_order(ids, seed)
    n_train = int(math.floor(n * split_ratios[0] + 1e-9))
    n_val = int(math.floor(n * split_ratios[1] + 1e-9))
    split_of = {}
    for rank, sid in enumerate(order):
        split_of[sid] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    lines = []
    for sid, s in zip(ids, seeds):
        smp = generate_sample(int(s), duration_range)
        rel = f"motions/{sid}.mof"
        save_motion(out / rel, smp.motion)
        rec = {
            "id": sid,
            "motion_path": rel,
            "caption": smp.caption,
            "phase_split": smp.phase_split,
            "vision": [[float(v) for v in row] for row in smp.vision],
            "split": split_of[sid],
            "primitives": [p.kind for p in smp.primitives],
            "seed": int(s),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class CorpusRecord:
    id: str
    motion: MotionSequence
    caption: str
    phase_split: int
    vision: np.ndarray
    split: str
    primitives: tuple[str, str]


def load_corpus(manifest: Path | str) -> list[CorpusRecord]:
    manifest = Path(manifest)
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        out.append(
            CorpusRecord(
                id=r["id"],
                motion=load_motion(manifest.parent / r["motion_path"]),
                caption=r["caption"],
                phase_split=int(r["phase_split"]),
                vision=np.asarray(r["vision"], dtype=np.float32).reshape(-1, VISION_DIM),
                split=r["split"],
                primitives=tuple(r.get("primitives", ("", ""))),
            )
        )
    return out
