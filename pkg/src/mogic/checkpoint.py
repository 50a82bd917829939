"""MGC1 checkpoint container.

Layout (little-endian)::

    b"MGC1" | u32 version | u32 n_sections
    per section:  u16 name_len | name | u32 n_entries
    per entry:    u16 name_len | name | u32 ndim | u32 dims[ndim] | f32 payload

Sections: ``ae``, ``cmt``, ``mgh``, ``iph``, ``cond`` (model parameters and
buffers by top-level module), ``stats`` (normalisation buffers),
``optimizer`` (Adam moments + step, optional), ``config`` (the resolved INI
text stored one byte per f32) and ``meta`` (step and epoch counters).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig

MAGIC = b"MGC1"
VERSION = 1
KNOWN_SECTIONS = ("ae", "cmt", "mgh", "iph", "cond", "stats", "optimizer", "config", "meta")
_MODULE_SECTIONS = ("ae", "cmt", "mgh", "iph", "cond")
_STAT_BUFFERS = ("feat_mean", "feat_std", "lat_mean", "lat_std")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownSectionError(CheckpointError):
    pass


class ResumeError(CheckpointError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_section(name: str, entries: dict[str, torch.Tensor]) -> bytes:
    parts = [_pack_name(name), struct.pack("<I", len(entries))]
    for key, t in entries.items():
        arr = t.detach().to(torch.float32).contiguous().numpy()
        parts.append(_pack_name(key))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def _text_tensor(text: str) -> torch.Tensor:
    return torch.tensor(list(text.encode("utf-8")), dtype=torch.float32)


def _tensor_text(t: torch.Tensor) -> str:
    return bytes(int(v) for v in t.tolist()).decode("utf-8")


@dataclass
class Checkpoint:
    sections: dict[str, dict[str, torch.Tensor]]

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_ini(_tensor_text(self.sections["config"]["text"]))

    @property
    def step(self) -> int:
        return int(self.sections.get("meta", {}).get("step", torch.zeros(1)).item())

    @property
    def epoch(self) -> int:
        return int(self.sections.get("meta", {}).get("epoch", torch.zeros(1)).item())

    @property
    def has_optimizer(self) -> bool:
        return "optimizer" in self.sections


def save_checkpoint(path: Path | str, model, optimizer=None, step: int = 0, epoch: int = 0) -> None:
    sections: dict[str, dict[str, torch.Tensor]] = {s: {} for s in _MODULE_SECTIONS}
    sections["stats"] = {}
    for key, t in model.state_dict().items():
        top, _, rest = key.partition(".")
        if top in _MODULE_SECTIONS:
            sections[top][rest] = t
        elif key in _STAT_BUFFERS:
            sections["stats"][key] = t
        else:
            raise CheckpointError(f"no section for state entry {key!r}")
    if optimizer is not None:
        sections["optimizer"] = optimizer.state_tensors()
    sections["config"] = {"text": _text_tensor(model.cfg.to_ini())}
    sections["meta"] = {"step": torch.tensor([float(step)]), "epoch": torch.tensor([float(epoch)])}
    blob = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    blob += [_pack_section(n, e) for n, e in sections.items()]
    Path(path).write_bytes(b"".join(blob))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError("checkpoint file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def read_checkpoint(path: Path | str) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic {magic!r}; not an MGC1 checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(r.u32()):
        sname = r.name()
        if sname not in KNOWN_SECTIONS:
            raise UnknownSectionError(f"unknown checkpoint section {sname!r}")
        entries = {}
        for _ in range(r.u32()):
            key = r.name()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
            entries[key] = torch.from_numpy(arr.astype(np.float32))
        sections[sname] = entries
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last section")
    if "config" not in sections:
        raise CheckpointError("checkpoint has no config section")
    return Checkpoint(sections)


def load_checkpoint(path: Path | str):
    """Rebuild the model from a checkpoint; returns ``(model, checkpoint)``."""
    from .model import MoGIC

    ck = read_checkpoint(path)
    model = MoGIC(ck.config)
    state = {}
    for sec in _MODULE_SECTIONS:
        for key, t in ck.sections.get(sec, {}).items():
            state[f"{sec}.{key}"] = t
    state.update(ck.sections.get("stats", {}))
    model.load_state_dict(state, strict=True)
    model.freeze_autoencoder()
    model.eval()
    return model, ck


def restore_optimizer(ck: Checkpoint, optimizer) -> None:
    """Load Adam state for a training resume; refuses inference-only files."""
    if not ck.has_optimizer:
        raise ResumeError("checkpoint has no optimizer section; it can be used for inference only")
    optimizer.load_state_tensors(ck.sections["optimizer"])
