"""Dense tensor kernel: differentiable primitives and a warmup Adam optimizer.

Everything here is a thin functional layer over CPU ``torch`` tensors in
float32. Reverse-mode differentiation is torch's autograd tape; the
functions below pin down the exact semantics the rest of the package relies
on (shape checks, stabilised softmax, affine-free layer norm, masked
cross-entropy) and give them stable names.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An option value is not recognised."""


class ContractError(RuntimeError):
    """A call violates an operation's preconditions."""


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a float32 tensor from nested lists / arrays."""
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with leading batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # max subtraction keeps exp() finite for large logits
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardise the last axis. No learnable affine; callers modulate."""
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


_ACTIVATIONS = {
    "gelu": lambda x: F.gelu(x, approximate="tanh"),
    "silu": F.silu,
    "relu": F.relu,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean Huber loss: 0.5 d^2/beta inside |d|<beta, |d|-0.5 beta outside."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"smooth_l1: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    if beta <= 0:
        raise ConfigError("smooth_l1: beta must be positive")
    d = pred - target
    ad = d.abs()
    loss = torch.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return loss.mean()


def cross_entropy_logits(
    logits: Tensor, targets: Tensor, ignore_id: int | None = None
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions.

    ``logits`` is ``(..., V)`` and ``targets`` the matching integer ids.
    Returns 0 when every position is ignored.
    """
    vocab = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy_logits: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    flat_t = targets.reshape(-1).long()
    keep = torch.ones_like(flat_t, dtype=torch.bool)
    if ignore_id is not None:
        keep = flat_t != ignore_id
    bad = keep & ((flat_t < 0) | (flat_t >= vocab))
    if bool(bad.any()):
        raise ContractError(
            f"cross_entropy_logits: target id {int(flat_t[bad][0])} outside [0, {vocab})"
        )
    flat_l = logits.reshape(-1, vocab)
    logp = flat_l - torch.logsumexp(flat_l, dim=-1, keepdim=True)
    safe_t = torch.where(keep, flat_t, torch.zeros_like(flat_t))
    nll = -logp.gather(1, safe_t[:, None])[:, 0]
    n = keep.sum()
    if int(n) == 0:
        return logits.sum() * 0.0
    return (nll * keep).sum() / n


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad.

    The autograd tape is freed afterwards; run a fresh forward before the
    next call.
    """
    if loss.numel() != 1 or loss.ndim != 0:
        raise ContractError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    loss.backward()


@dataclass
class AdamState:
    lr: float = 2e-4
    warmup_steps: int = 2000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[Tensor] = field(default_factory=list)
    exp_avg_sq: list[Tensor] = field(default_factory=list)

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then constant."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr


@torch.no_grad()
def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor | None],
    state: AdamState,
) -> float:
    """Apply one Adam update in place; returns the learning rate used.

    Parameters whose gradient is ``None`` are skipped entirely (value and
    moment estimates untouched), so a head that received no loss this step
    does not drift on stale momentum.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ShapeError("adam_step: optimizer state does not match parameter list")
    state.step += 1
    lr = state.lr_at(state.step)
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(
                f"adam_step: grad {tuple(g.shape)} for param {tuple(p.shape)}"
            )
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return lr


class WarmupAdam:
    """Stateful wrapper binding ``adam_step`` to a fixed parameter list."""

    def __init__(
        self, params: Iterable[Tensor], lr: float = 2e-4, warmup_steps: int = 2000
    ) -> None:
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, warmup_steps=warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return adam_step(self.params, [p.grad for p in self.params], self.state)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {"step": torch.tensor([float(self.state.step)])}
        for i, (m, v) in enumerate(zip(self.state.exp_avg, self.state.exp_avg_sq)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor]) -> None:
        self.state.step = int(tensors["step"].item())
        n = len(self.params)
        if n and f"m.{n - 1}" not in tensors:
            raise ShapeError("optimizer state does not match parameter list")
        self.state.exp_avg = [tensors[f"m.{i}"].clone() for i in range(n)] if n and "m.0" in tensors else []
        self.state.exp_avg_sq = [tensors[f"v.{i}"].clone() for i in range(n)] if n and "v.0" in tensors else []


def sinusoidal_embedding(positions: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Fixed sin/cos code for (possibly fractional) positions; shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    ).to(positions.dtype if positions.is_floating_point() else DTYPE)
    args = positions.to(freqs.dtype)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb
