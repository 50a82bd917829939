"""Generation heads: continuous motion head and autoregressive intention head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import BOS_ID, EOS_ID, PAD_ID, VOCAB_SIZE
from .numerics import cross_entropy_logits, layer_norm, sinusoidal_embedding, softmax


class TimeRangeError(ValueError):
    pass


class EmptyTargetError(ValueError):
    pass


# -- interpolant -------------------------------------------------------------

@dataclass(frozen=True)
class InterpolantSchedule:
    """Path ``z_t = alpha(t) z_0 + sigma(t) eps``; linear by default."""

    alpha: Callable = lambda t: 1.0 - t
    sigma: Callable = lambda t: t
    alpha_dot: Callable = lambda t: -torch.ones_like(t) if torch.is_tensor(t) else -1.0
    sigma_dot: Callable = lambda t: torch.ones_like(t) if torch.is_tensor(t) else 1.0


LINEAR = InterpolantSchedule()


def _check_t(t) -> None:
    tt = torch.as_tensor(t)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise TimeRangeError("t must lie in [0, 1]")


def interpolate(z0: torch.Tensor, eps: torch.Tensor, t, schedule: InterpolantSchedule = LINEAR) -> torch.Tensor:
    _check_t(t)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    return schedule.alpha(t) * z0 + schedule.sigma(t) * eps


def velocity_target(z0: torch.Tensor, eps: torch.Tensor, t, schedule: InterpolantSchedule = LINEAR) -> torch.Tensor:
    _check_t(t)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    return schedule.alpha_dot(t) * z0 + schedule.sigma_dot(t) * eps


# -- samplers ------------------------------------------------------------------

VelocityFn = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def _time_grid(steps: int, dtype) -> torch.Tensor:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64).to(dtype)


@torch.no_grad()
def ode_euler_sample(velocity_fn: VelocityFn, z_T: torch.Tensor, steps: int, cond=None) -> torch.Tensor:
    """Explicit Euler on the probability-flow ODE from t=1 down to t=0."""
    ts = _time_grid(steps, z_T.dtype)
    z = z_T
    for i in range(steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        v = velocity_fn(z, t.expand(z.shape[:-1]), cond)
        z = z - dt * v
    return z


@torch.no_grad()
def sde_euler_maruyama_sample(
    velocity_fn: VelocityFn,
    z_T: torch.Tensor,
    steps: int,
    cond=None,
    noise_scale: float = 1.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Euler-Maruyama on the reverse-time SDE of the linear interpolant.

    With diffusion ``w_t = noise_scale * t`` and the score recovered from the
    velocity, ``s = -(z + (1 - t) v) / t``, each step back in time is

        z <- z - dt (v - w s / 2) + sqrt(w dt) xi.

    ``w s`` stays finite as ``t -> 0``. The final step adds no noise.
    """
    if noise_scale == 0.0:
        return ode_euler_sample(velocity_fn, z_T, steps, cond)
    ts = _time_grid(steps, z_T.dtype)
    z = z_T
    for i in range(steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        v = velocity_fn(z, t.expand(z.shape[:-1]), cond)
        w_times_score = -noise_scale * (z + (1.0 - t) * v)
        z = z - dt * (v - 0.5 * w_times_score)
        if i < steps - 1:
            xi = torch.randn(z.shape, generator=generator, dtype=z.dtype)
            z = z + torch.sqrt(noise_scale * t * dt) * xi
    return z


# -- motion generation head ----------------------------------------------------

@dataclass
class MGHConfig:
    depth: int = 10
    width: int = 1280
    time_dim: int = 256

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("MGH depth must be >= 1")


class _ResBlock(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.ada = nn.Linear(width, 3 * width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale, gate = self.ada(F.silu(c)).chunk(3, dim=-1)
        h = layer_norm(x) * (1 + scale) + shift
        return x + gate * self.fc2(F.silu(self.fc1(h)))


class MotionGenerationHead(nn.Module):
    """Per-token velocity MLP ``v(z_t, t, z_i)``.

    The input layer sees ``concat(z_t, time_embedding(t), z_i)``; residual
    blocks are additionally modulated by ``time + cond``. The output layer
    starts at zero so an untrained head predicts zero velocity.
    """

    def __init__(self, cfg: MGHConfig, latent_dim: int, cond_dim: int) -> None:
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.inp = nn.Linear(latent_dim + cfg.time_dim + cond_dim, w)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.cond_proj = nn.Linear(cond_dim, w)
        self.blocks = nn.ModuleList(_ResBlock(w) for _ in range(cfg.depth))
        self.final_ada = nn.Linear(w, 2 * w)
        self.out = nn.Linear(w, latent_dim)
        for m in (self.final_ada, self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # time scaled to [0, 1000] so the sinusoid resolves small steps
        temb = sinusoidal_embedding(t * 1000.0, self.cfg.time_dim).to(z_t.dtype)
        x = self.inp(torch.cat([z_t, temb, cond], dim=-1))
        c = self.time_mlp(temb) + self.cond_proj(cond)
        for blk in self.blocks:
            x = blk(x, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        return self.out(layer_norm(x) * (1 + scale) + shift)


# -- intention prediction head -------------------------------------------------

@dataclass
class IPHConfig:
    layers: int = 3
    width: int = 384
    heads: int = 6
    ffn_mult: int = 4
    max_len: int = 32
    rel_buckets: int = 32
    rel_max_distance: int = 64

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("IPH needs at least one layer")


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def relative_position_bucket(rel: torch.Tensor, n_buckets: int, max_distance: int) -> torch.Tensor:
    """Causal T5 bucketing of ``key - query`` offsets (only the past is seen)."""
    n = (-rel).clamp(min=0)
    exact = n_buckets // 2
    is_small = n < exact
    large = exact + (
        torch.log(n.float().clamp(min=1) / exact) / math.log(max_distance / exact) * (n_buckets - exact)
    ).long()
    large = large.clamp(max=n_buckets - 1)
    return torch.where(is_small, n, large)


class _DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, mult: int) -> None:
        super().__init__()
        self.heads = heads
        self.n1, self.n2, self.n3 = RMSNorm(d), RMSNorm(d), RMSNorm(d)
        self.sa_qkv = nn.Linear(d, 3 * d, bias=False)
        self.sa_o = nn.Linear(d, d, bias=False)
        self.ca_q = nn.Linear(d, d, bias=False)
        self.ca_kv = nn.Linear(d, 2 * d, bias=False)
        self.ca_o = nn.Linear(d, d, bias=False)
        self.ff1 = nn.Linear(d, mult * d, bias=False)
        self.ff2 = nn.Linear(mult * d, d, bias=False)

    def _split(self, x):
        b, l, d = x.shape
        return x.view(b, l, self.heads, d // self.heads).transpose(1, 2)

    def _merge(self, x):
        b, h, l, hd = x.shape
        return x.transpose(1, 2).reshape(b, l, h * hd)

    def forward(self, x, memory, mem_mask, self_bias):
        # T5 omits the 1/sqrt(d) scaling; the bias carries position
        h = self.n1(x)
        q, k, v = self.sa_qkv(h).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        a = softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + self_bias, axis=-1)
        x = x + self.sa_o(self._merge(a @ v))
        h = self.n2(x)
        q = self._split(self.ca_q(h))
        k, v = self.ca_kv(memory).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        s = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mem_mask is not None:
            s = s.masked_fill(~mem_mask[:, None, None, :], float("-inf"))
        x = x + self.ca_o(self._merge(softmax(s, axis=-1) @ v))
        h = self.n3(x)
        return x + self.ff2(F.relu(self.ff1(h)))


class IntentionHead(nn.Module):
    """T5-style decoder: causal self-attention with relative position bias,
    cross-attention over the CMT output, RMSNorm pre-normalisation."""

    def __init__(self, cfg: IPHConfig, memory_dim: int, vocab_size: int = VOCAB_SIZE) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, d)
        self.mem_proj = nn.Identity() if memory_dim == d else nn.Linear(memory_dim, d, bias=False)
        self.rel_bias = nn.Embedding(cfg.rel_buckets, cfg.heads)
        self.layers = nn.ModuleList(_DecoderLayer(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.layers))
        self.norm = RMSNorm(d)
        self.lm_head = nn.Linear(d, vocab_size)

    def _self_bias(self, l: int, dtype) -> torch.Tensor:
        pos = torch.arange(l)
        rel = pos[None, :] - pos[:, None]
        buckets = relative_position_bucket(rel, self.cfg.rel_buckets, self.cfg.rel_max_distance)
        bias = self.rel_bias(buckets).permute(2, 0, 1)[None].to(dtype)  # (1, H, L, L)
        causal = rel > 0
        return bias.masked_fill(causal, float("-inf"))

    def logits(self, inputs: torch.Tensor, memory: torch.Tensor, mem_mask: torch.Tensor | None) -> torch.Tensor:
        x = self.embed(inputs)
        mem = self.mem_proj(memory)
        bias = self._self_bias(inputs.shape[1], x.dtype)
        for layer in self.layers:
            x = layer(x, mem, mem_mask, bias)
        return self.lm_head(self.norm(x))

    def loss(self, memory: torch.Tensor, mem_mask: torch.Tensor | None, targets: torch.Tensor) -> torch.Tensor:
        """Teacher-forced cross-entropy; ``targets`` (B, T) end in EOS, PAD-filled."""
        if targets.numel() == 0 or bool(((targets != PAD_ID).sum(-1) == 0).any()):
            raise EmptyTargetError("intention target is empty")
        bos = torch.full_like(targets[:, :1], BOS_ID)
        inputs = torch.cat([bos, targets[:, :-1]], dim=1)
        inputs = inputs.masked_fill(inputs == PAD_ID, PAD_ID)
        logits = self.logits(inputs, memory, mem_mask)
        return cross_entropy_logits(logits, targets, ignore_id=PAD_ID)

    @torch.no_grad()
    def generate(
        self,
        memory: torch.Tensor,
        mem_mask: torch.Tensor | None = None,
        max_len: int | None = None,
        beam: int = 1,
    ) -> list[list[int]]:
        """Decode token ids (without BOS/EOS) per batch item."""
        max_len = max_len or self.cfg.max_len
        if beam > 1:
            return [
                self._beam(memory[i : i + 1], None if mem_mask is None else mem_mask[i : i + 1], max_len, beam)
                for i in range(memory.shape[0])
            ]
        b = memory.shape[0]
        seq = torch.full((b, 1), BOS_ID, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_len):
            nxt = self.logits(seq, memory, mem_mask)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == EOS_ID
            if bool(done.all()):
                break
        out = []
        for row in seq[:, 1:].tolist():
            ids = []
            for i in row:
                if i in (EOS_ID, PAD_ID):
                    break
                ids.append(i)
            out.append(ids)
        return out

    def _beam(self, memory, mem_mask, max_len: int, width: int) -> list[int]:
        beams = [([BOS_ID], 0.0, False)]
        for _ in range(max_len):
            if all(d for _, _, d in beams):
                break
            cand = []
            for ids, score, finished in beams:
                if finished:
                    cand.append((ids, score, True))
                    continue
                logp = torch.log_softmax(
                    self.logits(torch.tensor([ids]), memory, mem_mask)[0, -1], dim=-1
                )
                top = torch.topk(logp, width)
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    cand.append((ids + [tok], score + lp, tok == EOS_ID))
            cand.sort(key=lambda c: -c[1])
            beams = cand[:width]
        best = beams[0][0][1:]
        return [i for i in best if i not in (EOS_ID, PAD_ID)][: max_len]
