"""Conditional Masked Transformer.

Each layer runs self-attention over motion tokens, a mixture of adaptive
top-k cross-attention experts over condition tokens, and a feed-forward
block. Every sub-layer ``h`` is wrapped as

    z <- z + gamma * h(alpha * LN(z) + beta),   (alpha, beta, gamma) = W_ada(c_g)

with the gate ``gamma`` initialised to zero, so an untrained stack is the
identity on its input embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from .numerics import activation, layer_norm, sinusoidal_embedding, softmax

INF = math.inf


@dataclass
class ExpertConfig:
    k_min: int = 1
    k_max: float = INF
    tau: float = 1.0

    def __post_init__(self) -> None:
        # k = 0 would allow an empty selection, which cannot be renormalised
        self.k_min = max(1, int(self.k_min))
        if self.k_max < self.k_min:
            raise ValueError(f"k_max {self.k_max} < k_min {self.k_min}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")


DEFAULT_EXPERTS = (ExpertConfig(1, INF, 1.0), ExpertConfig(1, 6, 0.8))


@dataclass
class CMTConfig:
    layers: int = 1
    width: int = 384
    heads: int = 6
    ffn_mult: int = 4
    experts: tuple[ExpertConfig, ...] = DEFAULT_EXPERTS
    act: str = "gelu"

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        self.experts = tuple(self.experts)


# -- adaptive top-k ----------------------------------------------------------

def dynamic_topk(
    probs: torch.Tensor, cfg: ExpertConfig, valid: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-row selection of the smallest prefix reaching mass ``tau``.

    Rows are sorted descending (ties keep the lower index first); ``k*`` is
    the smallest ``k`` whose top-``k`` mass reaches ``tau``, clamped to
    ``[k_min, k_max]`` and to the number of valid entries.

    Returns ``(k_dyn, selected, k_star)``: counts of shape ``probs.shape[:-1]``
    and a boolean selection mask shaped like ``probs``.
    """
    with torch.no_grad():
        n = probs.shape[-1]
        if valid is None:
            valid = torch.ones_like(probs, dtype=torch.bool)
        n_valid = valid.sum(-1)
        p = probs.detach().masked_fill(~valid, -1.0)
        sorted_p, order = torch.sort(p, dim=-1, descending=True, stable=True)
        csum = torch.cumsum(sorted_p.clamp_min(0).double(), dim=-1)
        tol = 16 * torch.finfo(probs.dtype).eps
        if cfg.tau >= 1.0:
            # every softmax entry is positive, so full mass needs all of them
            k_star = n_valid.clone()
        else:
            reached = csum >= cfg.tau - tol
            first = torch.where(
                reached.any(-1), reached.double().argmax(-1) + 1, n_valid
            )
            k_star = torch.minimum(first, n_valid)
        k_hi = n_valid if math.isinf(cfg.k_max) else n_valid.clamp(max=int(cfg.k_max))
        k_dyn = torch.minimum(k_star.clamp(min=cfg.k_min), k_hi)
        ranks = torch.arange(n).expand_as(p)
        sel_sorted = ranks < k_dyn[..., None]
        selected = torch.zeros_like(sel_sorted).scatter(-1, order, sel_sorted)
    return k_dyn, selected, k_star


def renormalize_topk(attn: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
    """Zero unselected entries and rescale each row to sum to one."""
    kept = attn * selected.to(attn.dtype)
    total = kept.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise RuntimeError("renormalize_topk: a row has no selected mass")
    return kept / total


# -- modulation --------------------------------------------------------------

class AdaModulation(nn.Module):
    """W_ada: SiLU -> Linear producing one (alpha, beta, gamma) triple per sub-layer."""

    def __init__(self, cond_dim: int, dim: int, n_sublayers: int) -> None:
        super().__init__()
        self.dim = dim
        self.n = n_sublayers
        self.proj = nn.Linear(cond_dim, 3 * dim * n_sublayers)
        nn.init.zeros_(self.proj.weight)
        bias = torch.zeros(n_sublayers, 3, dim)
        bias[:, 0] = 1.0  # alpha starts at 1, beta and the gate at 0
        with torch.no_grad():
            self.proj.bias.copy_(bias.flatten())

    def forward(self, c_g: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        out = self.proj(torch.nn.functional.silu(c_g)).view(-1, self.n, 3, self.dim)
        return [(out[:, i, 0], out[:, i, 1], out[:, i, 2]) for i in range(self.n)]


def ada_modulate(
    z: torch.Tensor,
    params: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    h: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Gated residual update of ``z`` (B, L, d) by sub-layer ``h``."""
    alpha, beta, gamma = params
    zbar = layer_norm(z)
    return z + gamma[:, None, :] * h(alpha[:, None, :] * zbar + beta[:, None, :])


# -- attention blocks --------------------------------------------------------

def _masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    return softmax(scores, axis=-1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, l, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, l, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        a = _masked_softmax(scores, mask)
        y = (a @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(y)


class MixtureCrossAttention(nn.Module):
    """Parallel single-head cross-attention experts with adaptive top-k scope."""

    def __init__(self, dim: int, experts: tuple[ExpertConfig, ...]) -> None:
        super().__init__()
        if not experts:
            raise ValueError("need at least one expert")
        self.dim = dim
        self.experts = tuple(experts)
        self.q = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in experts)
        self.k = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in experts)
        self.v = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in experts)
        self.out = nn.Linear(dim, dim)
        self.last_attention: list[torch.Tensor] = []

    def expert_scores(self, e: int, z: torch.Tensor, c_tok: torch.Tensor, c_mask: torch.Tensor | None) -> torch.Tensor:
        q = self.q[e](z)
        k = self.k[e](c_tok)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim)
        return _masked_softmax(scores, None if c_mask is None else c_mask[:, None, :])

    def mix(self, z: torch.Tensor, c_tok: torch.Tensor, c_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Sum of expert contributions before the output projection."""
        total = 0.0
        self.last_attention = []
        valid = None if c_mask is None else c_mask[:, None, :].expand(-1, z.shape[1], -1)
        for e, cfg in enumerate(self.experts):
            a = self.expert_scores(e, z, c_tok, c_mask)
            _, sel, _ = dynamic_topk(a, cfg, valid)
            a_t = renormalize_topk(a, sel)
            self.last_attention.append(a_t.detach())
            total = total + a_t @ self.v[e](c_tok)
        return total

    def forward(self, z: torch.Tensor, c_tok: torch.Tensor, c_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.out(self.mix(z, c_tok, c_mask))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int, act: str) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)
        self.act = act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(activation(self.fc1(x), self.act))


class CMTLayer(nn.Module):
    def __init__(self, cfg: CMTConfig) -> None:
        super().__init__()
        d = cfg.width
        self.ada = AdaModulation(d, d, 3)
        self.self_attn = SelfAttention(d, cfg.heads)
        self.cross = MixtureCrossAttention(d, cfg.experts)
        self.ffn = FeedForward(d, cfg.ffn_mult, cfg.act)

    def forward(self, z, c_tok, c_mask, c_g, key_mask):
        p_sa, p_ca, p_ff = self.ada(c_g)
        z = ada_modulate(z, p_sa, lambda x: self.self_attn(x, key_mask))
        z = ada_modulate(z, p_ca, lambda x: self.cross(x, c_tok, c_mask))
        z = ada_modulate(z, p_ff, self.ffn)
        return z


class ConditionalMaskedTransformer(nn.Module):
    def __init__(self, cfg: CMTConfig, latent_dim: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(latent_dim, cfg.width)
        self.mask_token = nn.Parameter(torch.randn(cfg.width) * 0.02)
        self.layers = nn.ModuleList(CMTLayer(cfg) for _ in range(cfg.layers))

    def embed(self, latents: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """Project latents, swap in [MASK] where hidden, add sinusoidal positions."""
        x = self.in_proj(latents)
        x = torch.where(masked[..., None], self.mask_token.expand_as(x), x)
        pos = sinusoidal_embedding(torch.arange(x.shape[1], dtype=x.dtype), self.cfg.width)
        return x + pos.to(x.dtype)

    def forward(
        self,
        latents: torch.Tensor,
        masked: torch.Tensor,
        bundle,
        valid: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """``latents`` (B, L, d_m), ``masked``/``valid`` (B, L) -> z (B, L, width)."""
        z = self.embed(latents, masked)
        for layer in self.layers:
            z = layer(z, bundle.tokens, bundle.mask, bundle.global_, valid)
        return z
