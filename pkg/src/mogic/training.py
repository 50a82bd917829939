"""Joint multi-task training, mask construction and iterative masked decoding."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .conditioning import ConditionBundle
from .config import TASKS, SampleConfig, TrainConfig
from .heads import interpolate, ode_euler_sample, sde_euler_maruyama_sample, velocity_target
from .model import LatentItem, MoGIC, pad_targets, truncate_vision
from .motion_repr import (
    MotionSequence,
    denormalize,
    extract_features,
    facing_yaw,
    reconstruct_positions,
)
from .numerics import WarmupAdam, backward

INBETWEEN_MODES = ("prefix", "suffix", "infix", "circumfix")


class TaskInputError(ValueError):
    pass


# -- masks -------------------------------------------------------------------

@dataclass
class MaskSpec:
    mask: np.ndarray  # (l',) bool, True = hidden
    mode: str
    truncated: bool = False

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def keep_len(self) -> int:
        """Tokens fed to the model (truncated tokens are removed, not masked)."""
        if not self.truncated:
            return len(self.mask)
        return len(self.mask) - self.n_masked


def sample_mask(length: int, rng: np.random.Generator) -> MaskSpec:
    """Random training mask with cosine-distributed ratio; never empty."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rho = math.cos(math.pi * rng.random() / 2.0)
    while True:
        m = rng.random(length) < rho
        if m.any():
            return MaskSpec(m, "train-random")


def build_intent_mask(length: int) -> MaskSpec:
    """Hide (truncate) the latter ``ceil(l/2)`` tokens."""
    if length < 2:
        raise ValueError("intent truncation needs at least 2 tokens")
    m = np.zeros(length, dtype=bool)
    m[length - math.ceil(length / 2) :] = True
    return MaskSpec(m, "intent-truncate", truncated=True)


def build_inbetween_mask(length: int, mode: str, visible_fraction: float) -> MaskSpec:
    """Completion masks; the visible count is ``floor(f * l)`` clamped to ``[1, l-1]``.

    Middle segments (the hidden block for infix, the visible block for
    circumfix) start at ``floor((l - size) / 2)``.
    """
    if length < 2:
        raise ValueError("in-betweening needs at least 2 tokens")
    if not 0.0 < visible_fraction < 1.0:
        raise ValueError("visible_fraction must lie in (0, 1)")
    vis = min(max(int(math.floor(visible_fraction * length + 1e-9)), 1), length - 1)
    hid = length - vis
    m = np.zeros(length, dtype=bool)
    if mode == "prefix":
        m[:hid] = True
    elif mode == "suffix":
        m[vis:] = True
    elif mode == "infix":
        s = (length - hid) // 2
        m[s : s + hid] = True
    elif mode == "circumfix":
        s = (length - vis) // 2
        m[:] = True
        m[s : s + vis] = False
    else:
        raise ValueError(f"unknown in-between mode {mode!r}")
    return MaskSpec(m, mode)


def full_mask(length: int) -> MaskSpec:
    return MaskSpec(np.ones(length, dtype=bool), "full")


def committed_schedule(n_masked: int, iters: int) -> list[int]:
    """Total committed tokens after each decoding iteration (cosine schedule)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    out = []
    for j in range(iters):
        frac = 1.0 - math.cos(math.pi * (j + 1) / (2 * iters))
        out.append(n_masked if j == iters - 1 else min(n_masked, math.ceil(n_masked * frac - 1e-9)))
    return out


# -- batching ------------------------------------------------------------------

def task_inputs(task: str, item: LatentItem, rng: np.random.Generator, cfg: TrainConfig, keep_len: int | None = None):
    """(text ids | None, vision | None) available to ``task`` for ``item``."""
    if task == "l2m":
        return item.text_ids, None
    if task == "vl2m":
        return item.text_ids, item.vision
    if task == "v2m":
        return None, item.vision
    if task == "m2m":
        return None, None
    if task == "ip":
        vis = None
        if rng.random() >= cfg.ip_vision_dropout:
            frames = item.n_frames * (keep_len or item.length) // item.length
            vis = truncate_vision(item.vision, frames)
        return None, vis
    raise ValueError(f"unknown task {task!r}")


@dataclass
class Batch:
    latents: torch.Tensor  # (B, L, d)
    masked: torch.Tensor  # (B, L)
    valid: torch.Tensor  # (B, L)
    bundle: ConditionBundle
    intent_targets: torch.Tensor | None


def make_batch(
    model: MoGIC,
    items: list[LatentItem],
    task: str,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> Batch:
    seqs, masks, texts, visions = [], [], [], []
    for it in items:
        if task == "ip":
            spec = build_intent_mask(it.length)
            keep = spec.keep_len
            z = it.latents[:keep]
            m = sample_mask(keep, rng).mask
        else:
            keep = it.length
            z = it.latents
            m = sample_mask(it.length, rng).mask
        t, v = task_inputs(task, it, rng, cfg, keep)
        seqs.append(z)
        masks.append(m)
        texts.append(t)
        visions.append(v)
    b, L, d = len(seqs), max(len(s) for s in seqs), seqs[0].shape[-1]
    lat = torch.zeros(b, L, d)
    masked = torch.zeros(b, L, dtype=torch.bool)
    valid = torch.zeros(b, L, dtype=torch.bool)
    for i, (z, m) in enumerate(zip(seqs, masks)):
        lat[i, : len(z)] = z
        masked[i, : len(z)] = torch.as_tensor(m)
        valid[i, : len(z)] = True
    bundle = model.cond.assemble(texts, visions)
    targets = pad_targets([it.intent_target() for it in items]) if task == "ip" else None
    return Batch(lat, masked, valid, bundle, targets)


# -- losses --------------------------------------------------------------------

@dataclass
class LossParts:
    total: torch.Tensor
    motion: torch.Tensor
    intent: torch.Tensor | None


def compute_losses(
    model: MoGIC,
    batch: Batch,
    cfg: TrainConfig,
    use_intent: bool,
    generator: torch.Generator | None = None,
) -> LossParts:
    """Velocity-matching loss at masked positions plus the optional intent CE."""
    z = model.backbone(batch.latents, batch.masked, batch.valid, batch.bundle)
    sel = batch.masked & batch.valid
    cond = z[sel]  # (N, w)
    z0 = batch.latents[sel]  # (N, d)
    r = cfg.diffusion_mult
    cond = cond.repeat(r, 1)
    z0 = z0.repeat(r, 1)
    t = torch.rand(z0.shape[0], generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = interpolate(z0, eps, t[:, None])
    target = velocity_target(z0, eps, t[:, None])
    v = model.mgh(z_t, t, cond)
    motion = ((v - target) ** 2).mean()
    total = cfg.lambda_motion * motion
    intent = None
    if use_intent and batch.intent_targets is not None:
        intent = model.iph.loss(z, batch.valid, batch.intent_targets)
        total = total + cfg.lambda_intent * intent
    return LossParts(total, motion, intent)


# -- trainer ---------------------------------------------------------------------

def trainable_parameters(model: MoGIC, frozen: Iterable[str] = ()) -> list[torch.nn.Parameter]:
    """Parameters updated by joint training: everything but the auto-encoder
    and the listed top-level modules."""
    skip = {"ae", *frozen}
    return [p for n, p in model.named_parameters() if n.split(".")[0] not in skip]


class Trainer:
    """Owns the optimiser, RNG streams and the JSON-lines step log."""

    def __init__(
        self,
        model: MoGIC,
        cfg: TrainConfig,
        items: list[LatentItem],
        frozen: Iterable[str] = (),
        log_path: Path | str | None = None,
    ) -> None:
        if not items:
            raise ValueError("training needs at least one item")
        self.model = model
        self.cfg = cfg
        self.items = items
        self.frozen = tuple(frozen)
        model.freeze_autoencoder()
        for n, p in model.named_parameters():
            if n.split(".")[0] in self.frozen:
                p.requires_grad_(False)
        self.opt = WarmupAdam(trainable_parameters(model, self.frozen), lr=cfg.lr, warmup_steps=cfg.warmup_steps)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.log: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        w = cfg.task_weights()
        self.tasks = [t for t in TASKS if w[t] > 0]
        probs = np.array([w[t] for t in self.tasks])
        self.task_probs = probs / probs.sum()

    def sample_task(self) -> str:
        return self.tasks[int(self.rng.choice(len(self.tasks), p=self.task_probs))]

    def joint_step(self, batch_items: list[LatentItem]) -> dict:
        task = self.sample_task()
        use_intent = self.epoch % self.cfg.intent_period == 0 and self.cfg.lambda_intent > 0
        batch = make_batch(self.model, batch_items, task, self.rng, self.cfg)
        parts = compute_losses(self.model, batch, self.cfg, use_intent, self.gen)
        self.opt.zero_grad()
        backward(parts.total)
        lr = self.opt.step()
        self.step += 1
        rec = {
            "step": self.step,
            "epoch": self.epoch,
            "task": task,
            "loss_motion": parts.motion.item(),
            "loss_intent": None if parts.intent is None else parts.intent.item(),
            "lr": lr,
        }
        self.log.append(rec)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    def run_epoch(self, max_steps: int | None = None) -> None:
        order = self.rng.permutation(len(self.items))
        bs = self.cfg.batch_size
        for b in range(0, len(order), bs):
            if max_steps is not None and self.step >= max_steps:
                break
            self.joint_step([self.items[i] for i in order[b : b + bs]])
        self.epoch += 1

    def fit(self, epochs: int | None = None, max_steps: int | None = None, callback: Callable | None = None) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        cap = max_steps if max_steps is not None else (self.cfg.max_steps or None)
        self.model.train()
        for _ in range(epochs):
            if cap is not None and self.step >= cap:
                break
            self.run_epoch(cap)
            if callback is not None:
                callback(self)
        self.model.eval()
        return self.log


def finetune(
    model: MoGIC,
    task: str,
    cfg: TrainConfig,
    items: list[LatentItem],
    steps: int,
    log_path: Path | str | None = None,
) -> MoGIC:
    """Continue training on one task only. Motion-only tasks freeze the intent head."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if steps <= 0:
        return model
    weights = {f"w_{t}": (1.0 if t == task else 0.0) for t in TASKS}
    ft_cfg = TrainConfig(**{**cfg.__dict__, **weights})
    frozen = () if task == "ip" else ("iph",)
    trainer = Trainer(model, ft_cfg, items, frozen=frozen, log_path=log_path)
    epochs = math.ceil(steps / math.ceil(len(items) / ft_cfg.batch_size))
    trainer.fit(epochs=epochs, max_steps=steps)
    for p in model.parameters():
        p.requires_grad_(True)
    model.freeze_autoencoder()
    return model


@torch.no_grad()
def validation_motion_loss(
    model: MoGIC, items: list[LatentItem], task: str, cfg: TrainConfig, seed: int = 0
) -> float:
    """Motion loss with fixed masks/noise, for before/after comparisons."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    tot, n = 0.0, 0
    for b in range(0, len(items), cfg.batch_size):
        chunk = items[b : b + cfg.batch_size]
        batch = make_batch(model, chunk, task, rng, cfg)
        tot += compute_losses(model, batch, cfg, False, gen).motion.item() * len(chunk)
        n += len(chunk)
    return tot / n


# -- iterative decoding ----------------------------------------------------------

@torch.no_grad()
def iterative_masked_decode(
    model: MoGIC,
    bundle: ConditionBundle,
    lengths: list[int],
    iters: int,
    euler_steps: int,
    generator: torch.Generator,
    known: torch.Tensor | None = None,
    known_mask: torch.Tensor | None = None,
    noise_scale: float = 0.0,
) -> list[torch.Tensor]:
    """Fill every unknown latent token, committing a growing random subset per pass.

    ``known``/``known_mask`` (B, L, d)/(B, L) supply visible tokens for
    completion tasks; they are copied through untouched. Each pass samples
    all still-hidden tokens with the motion head and freezes the scheduled
    number of them.
    """
    model.eval()
    b, L = len(lengths), max(lengths)
    d = model.cfg.ae.latent_dim
    valid = torch.zeros(b, L, dtype=torch.bool)
    for i, n in enumerate(lengths):
        valid[i, :n] = True
    z = torch.zeros(b, L, d) if known is None else known.clone()
    vis = torch.zeros(b, L, dtype=torch.bool) if known_mask is None else known_mask.clone()
    hidden = valid & ~vis
    n_hidden = hidden.sum(1).tolist()
    schedules = [committed_schedule(n, iters) if n > 0 else [0] * iters for n in n_hidden]
    committed = [0] * b

    def vfn(x, t, c):
        return model.mgh(x, t, c)

    for j in range(iters):
        if not bool(hidden.any()):
            break
        cond = model.backbone(z, hidden, valid, bundle)[hidden]
        noise = torch.randn(cond.shape[0], d, generator=generator)
        if noise_scale > 0:
            sample = sde_euler_maruyama_sample(vfn, noise, euler_steps, cond, noise_scale, generator)
        else:
            sample = ode_euler_sample(vfn, noise, euler_steps, cond)
        proposal = torch.zeros_like(z)
        proposal[hidden] = sample
        for i in range(b):
            todo = schedules[i][j] - committed[i]
            if todo <= 0:
                continue
            pos = torch.nonzero(hidden[i]).flatten()
            pick = pos[torch.randperm(len(pos), generator=generator)[:todo]]
            z[i, pick] = proposal[i, pick]
            hidden[i, pick] = False
            committed[i] += len(pick)
    return [z[i, :n].clone() for i, n in enumerate(lengths)]


# -- high-level generation ---------------------------------------------------------

@dataclass
class GenerationInputs:
    text: str | None = None
    vision: np.ndarray | None = None
    motion: MotionSequence | None = None
    seconds: float | None = None
    mask: MaskSpec | None = None  # completion mask for m2m; None = fully visible


@dataclass
class GenerationResult:
    motion: MotionSequence | None
    features: np.ndarray | None  # normalised features
    latents: torch.Tensor | None
    intention_ids: list[int] | None = None
    intention: str | None = None
    input_latents: torch.Tensor | None = None
    mask: MaskSpec | None = None


_REQUIRED = {
    "l2m": ("text",),
    "vl2m": ("text", "vision"),
    "v2m": ("vision",),
    "m2m": ("motion",),
    "ip": ("motion",),
}


def _check_inputs(task: str, inputs: GenerationInputs) -> None:
    if task not in _REQUIRED:
        raise TaskInputError(f"unknown task {task!r}")
    for name in _REQUIRED[task]:
        if getattr(inputs, name) is None:
            raise TaskInputError(f"task {task} needs {name} input")


def _to_motion(model: MoGIC, feats_norm: np.ndarray, fps: float, init_yaw=0.0, init_xz=(0.0, 0.0)) -> MotionSequence:
    raw = denormalize(feats_norm, model.feature_stats)
    return reconstruct_positions(raw, init_yaw=init_yaw, init_xz=init_xz, fps=fps)


def generate(
    model: MoGIC,
    task: str,
    inputs: GenerationInputs,
    sample: SampleConfig | None = None,
    seed: int = 0,
    fps: float = 30.0,
) -> GenerationResult:
    """Run one of the five tasks end to end."""
    _check_inputs(task, inputs)
    sample = sample or SampleConfig()
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    text_ids = None
    if inputs.text is not None:
        text_ids, _ = model.cond.text_ids(inputs.text)
    vision = inputs.vision if task in ("vl2m", "v2m") or (task in ("m2m", "ip") and inputs.vision is not None) else None
    if task == "l2m":
        vision = None
    if task == "v2m":
        text_ids = None

    if task in ("l2m", "vl2m", "v2m"):
        seconds = inputs.seconds
        if seconds is None:
            seconds = float(len(vision)) - 0.5 if vision is not None else 4.0
        n_frames = max(int(round(seconds * fps)) - 1, model.ae.downsample)
        length = model.ae.latent_length(n_frames)
        bundle = model.cond.assemble([text_ids], [vision])
        lat = iterative_masked_decode(
            model, bundle, [length], sample.iters, sample.euler_steps, gen, noise_scale=sample.noise_scale
        )[0]
        feats = model.decode_latents([lat], [n_frames])[0]
        return GenerationResult(_to_motion(model, feats, fps), feats, lat, mask=full_mask(length))

    feats_in = extract_features(inputs.motion)
    z_in = model.encode_features([feats_in])[0]
    yaw0 = float(facing_yaw(inputs.motion.frames[:1])[0])
    xz0 = (float(inputs.motion.frames[0, 0, 0]), float(inputs.motion.frames[0, 0, 2]))

    if task == "m2m":
        length = z_in.shape[0]
        spec = inputs.mask or MaskSpec(np.zeros(length, dtype=bool), "none")
        if len(spec.mask) != length:
            raise TaskInputError(f"mask covers {len(spec.mask)} tokens, motion has {length}")
        known_mask = torch.as_tensor(~spec.mask)[None]
        bundle = model.cond.assemble([text_ids], [vision])
        lat = iterative_masked_decode(
            model, bundle, [length], sample.iters, sample.euler_steps, gen,
            known=z_in[None], known_mask=known_mask, noise_scale=sample.noise_scale,
        )[0]
        feats = model.decode_latents([lat], [len(feats_in)])[0]
        return GenerationResult(
            _to_motion(model, feats, fps, yaw0, xz0), feats, lat, input_latents=z_in, mask=spec
        )

    # ip: the given motion is the observed prefix
    obs = z_in.shape[0]
    vis_obs = None if vision is None else truncate_vision(vision, len(feats_in), fps)
    bundle = model.cond.assemble([text_ids], [vis_obs])
    valid = torch.ones(1, obs, dtype=torch.bool)
    z = model.backbone(z_in[None], torch.zeros(1, obs, dtype=torch.bool), valid, bundle)
    ids = model.iph.generate(z, valid, beam=sample.beam)[0]
    text = model.cond.tokenizer.decode(ids)
    # complete the motion to twice the observed length, guided by the predicted text
    total = 2 * obs
    known = torch.zeros(1, total, z_in.shape[1])
    known[0, :obs] = z_in
    km = torch.zeros(1, total, dtype=torch.bool)
    km[0, :obs] = True
    bundle2 = model.cond.assemble([ids if ids else None], [vis_obs])
    lat = iterative_masked_decode(
        model, bundle2, [total], sample.iters, sample.euler_steps, gen,
        known=known, known_mask=km, noise_scale=sample.noise_scale,
    )[0]
    n_frames = total * model.ae.downsample
    feats = model.decode_latents([lat], [n_frames])[0]
    spec = MaskSpec(np.arange(total) >= obs, "suffix")
    return GenerationResult(
        _to_motion(model, feats, fps, yaw0, xz0), feats, lat, ids, text, input_latents=z_in, mask=spec
    )


@torch.no_grad()
def predict_intentions(model: MoGIC, items: list[LatentItem], batch: int = 128, use_vision: bool = False) -> list[list[int]]:
    """Greedy intention ids from the first (un-truncated) half of each item."""
    model.eval()
    out = []
    for b in range(0, len(items), batch):
        chunk = items[b : b + batch]
        seqs, visions = [], []
        for it in chunk:
            keep = build_intent_mask(it.length).keep_len
            seqs.append(it.latents[:keep])
            frames = it.n_frames * keep // it.length
            visions.append(truncate_vision(it.vision, frames) if use_vision else None)
        L = max(len(s) for s in seqs)
        lat = torch.zeros(len(seqs), L, seqs[0].shape[-1])
        valid = torch.zeros(len(seqs), L, dtype=torch.bool)
        for i, s in enumerate(seqs):
            lat[i, : len(s)] = s
            valid[i, : len(s)] = True
        bundle = model.cond.assemble([None] * len(chunk), visions)
        z = model.backbone(lat, torch.zeros_like(valid), valid, bundle)
        out.extend(model.iph.generate(z, valid))
    return out


@torch.no_grad()
def generate_from_items(
    model: MoGIC,
    items: list[LatentItem],
    task: str,
    sample: SampleConfig,
    seed: int = 0,
    batch: int = 256,
) -> list[np.ndarray]:
    """Batched text/vision-to-motion for evaluation; lengths follow the references."""
    gen = torch.Generator().manual_seed(seed)
    feats = []
    for b in range(0, len(items), batch):
        chunk = items[b : b + batch]
        texts = [it.text_ids if task in ("l2m", "vl2m") else None for it in chunk]
        visions = [it.vision if task in ("vl2m", "v2m") else None for it in chunk]
        bundle = model.cond.assemble(texts, visions)
        lat = iterative_masked_decode(
            model, bundle, [it.length for it in chunk], sample.iters, sample.euler_steps, gen,
            noise_scale=sample.noise_scale,
        )
        feats.extend(model.decode_latents(lat, [it.n_frames for it in chunk]))
    return feats
