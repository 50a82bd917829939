import struct

import numpy as np
import pytest
import torch

from mogic.checkpoint import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    ResumeError,
    UnknownSectionError,
    load_checkpoint,
    read_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from mogic.config import TrainConfig
from mogic.numerics import WarmupAdam
from mogic.training import Trainer, compute_losses, make_batch, trainable_parameters


def _forward(model, items):
    cfg = TrainConfig(diffusion_mult=1)
    batch = make_batch(model, items[:4], "ip", np.random.default_rng(0), cfg)
    with torch.no_grad():
        parts = compute_losses(model, batch, cfg, True, torch.Generator().manual_seed(0))
    return parts.motion, parts.intent


@pytest.fixture
def trained(tiny_model):
    model, items = tiny_model
    trainer = Trainer(model, TrainConfig(batch_size=8, lr=1e-3, warmup_steps=2, diffusion_mult=1), items["train"])
    trainer.fit(epochs=1)
    return model, items, trainer


def test_round_trip_is_bitwise(trained, tmp_path):
    model, items, trainer = trained
    path = tmp_path / "m.mgc"
    save_checkpoint(path, model, trainer.opt, step=trainer.step, epoch=trainer.epoch)
    assert path.read_bytes()[:4] == b"MGC1"
    back, ck = load_checkpoint(path)
    assert ck.step == trainer.step and ck.epoch == 1 and ck.has_optimizer
    assert ck.config.to_ini() == model.cfg.to_ini()
    for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b), k
    m1, i1 = _forward(model, items["train"])
    m2, i2 = _forward(back, items["train"])
    assert torch.equal(m1, m2) and torch.equal(i1, i2)


def test_resume_continues_identically(trained, tmp_path):
    model, items, trainer = trained
    path = tmp_path / "m.mgc"
    save_checkpoint(path, model, trainer.opt, step=trainer.step)
    back, ck = load_checkpoint(path)
    opt2 = WarmupAdam(trainable_parameters(back), lr=1e-3, warmup_steps=2)
    restore_optimizer(ck, opt2)
    assert opt2.state.step == trainer.opt.state.step
    cfg = TrainConfig(diffusion_mult=1)
    for m, opt in ((model, trainer.opt), (back, opt2)):
        m.train()
        batch = make_batch(m, items["train"][:8], "l2m", np.random.default_rng(3), cfg)
        loss = compute_losses(m, batch, cfg, False, torch.Generator().manual_seed(3)).total
        opt.zero_grad()
        loss.backward()
        opt.step()
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k


def test_missing_optimizer_is_inference_only(trained, tmp_path):
    model, _, _ = trained
    path = tmp_path / "inf.mgc"
    save_checkpoint(path, model)
    back, ck = load_checkpoint(path)
    assert not ck.has_optimizer
    with pytest.raises(ResumeError):
        restore_optimizer(ck, WarmupAdam(trainable_parameters(back)))


def test_bad_magic_and_version(trained, tmp_path):
    model, _, _ = trained
    path = tmp_path / "m.mgc"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "magic.mgc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(tmp_path / "magic.mgc")
    (tmp_path / "ver.mgc").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(tmp_path / "ver.mgc")


def test_truncated(trained, tmp_path):
    model, _, _ = trained
    path = tmp_path / "m.mgc"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    for cut in (6, 20, len(raw) // 2, len(raw) - 1):
        (tmp_path / "cut.mgc").write_bytes(raw[:cut])
        with pytest.raises(CheckpointTruncatedError):
            read_checkpoint(tmp_path / "cut.mgc")


def test_unknown_section(trained, tmp_path):
    model, _, _ = trained
    path = tmp_path / "m.mgc"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    n = struct.unpack("<I", raw[8:12])[0]
    extra = struct.pack("<H", 5) + b"bogus" + struct.pack("<I", 0)
    (tmp_path / "x.mgc").write_bytes(raw[:8] + struct.pack("<I", n + 1) + raw[12:] + extra)
    with pytest.raises(UnknownSectionError):
        read_checkpoint(tmp_path / "x.mgc")
