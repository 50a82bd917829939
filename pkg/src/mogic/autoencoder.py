"""Temporal convolutional auto-encoder between motion features and latent tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .motion_repr import FEATURE_DIM, FeatureStats, normalize
from .numerics import WarmupAdam, activation, backward, smooth_l1


class TooShortError(ValueError):
    pass


class EmptyCorpusError(ValueError):
    pass


@dataclass
class AEConfig:
    latent_dim: int = 384
    channels: tuple[int, ...] = (384, 384)
    strides: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    act: str = "silu"
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 64
    epochs: int = 50

    @property
    def downsample(self) -> int:
        return math.prod(self.strides)


@dataclass
class LatentMotionTokens:
    tokens: torch.Tensor  # (l', d_m)
    source_len: int


def _down_len(n: int, stride: int) -> int:
    return -(-n // stride)


def _length_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    return (torch.arange(size)[None, :] < lengths[:, None]).to(torch.float32)[:, None, :]


class MotionAutoencoder(nn.Module):
    """Strided 1-D convs down, transposed convs up; centred (non-causal) padding.

    Activations past each item's valid length are zeroed after every layer,
    so padding a batch never changes an item's output.
    """

    def __init__(self, cfg: AEConfig, feature_dim: int = FEATURE_DIM) -> None:
        super().__init__()
        if len(cfg.channels) != len(cfg.strides) - 1:
            raise ValueError("channels must list one width per hidden layer")
        self.cfg = cfg
        widths = [feature_dim, *cfg.channels, cfg.latent_dim]
        pad = cfg.kernel // 2
        self.enc = nn.ModuleList(
            nn.Conv1d(widths[i], widths[i + 1], cfg.kernel, stride=s, padding=pad)
            for i, s in enumerate(cfg.strides)
        )
        dec = []
        rev = widths[::-1]
        for i, s in enumerate(reversed(cfg.strides)):
            if s == 1:
                dec.append(nn.Conv1d(rev[i], rev[i + 1], cfg.kernel, padding=pad))
            else:
                dec.append(nn.ConvTranspose1d(rev[i], rev[i + 1], 2 * s, stride=s, padding=s // 2))
        self.dec = nn.ModuleList(dec)

    @property
    def downsample(self) -> int:
        return self.cfg.downsample

    def latent_length(self, n: int) -> int:
        for s in self.cfg.strides:
            n = _down_len(n, s)
        return n

    def encode_batch(self, x: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (B, L, C) features -> (B, L', d_m) tokens and token lengths."""
        if int(lengths.min()) < self.downsample:
            raise TooShortError(
                f"sequence of {int(lengths.min())} frames shorter than downsample factor {self.downsample}"
            )
        h = x.transpose(1, 2)
        lens = lengths.clone()
        h = h * _length_mask(lens, h.shape[-1])
        n = len(self.enc)
        for i, (conv, s) in enumerate(zip(self.enc, self.cfg.strides)):
            h = conv(h)
            if i < n - 1:
                h = activation(h, self.cfg.act)
            lens = (lens + s - 1) // s
            h = h * _length_mask(lens, h.shape[-1])
        return h.transpose(1, 2), lens

    def decode_batch(self, z: torch.Tensor, token_lengths: torch.Tensor, out_len: int) -> torch.Tensor:
        """``z``: (B, L', d_m) -> (B, out_len, C); caller crops per item."""
        h = z.transpose(1, 2)
        lens = token_lengths.clone()
        h = h * _length_mask(lens, h.shape[-1])
        n = len(self.dec)
        for i, (layer, s) in enumerate(zip(self.dec, reversed(self.cfg.strides))):
            h = layer(h)
            lens = lens * s
            if i < n - 1:
                h = activation(h, self.cfg.act)
                h = h * _length_mask(lens, h.shape[-1])
        return h[:, :, :out_len].transpose(1, 2)

    def encode(self, feats: np.ndarray | torch.Tensor) -> LatentMotionTokens:
        x = torch.as_tensor(np.asarray(feats), dtype=torch.float32)[None]
        z, _ = self.encode_batch(x, torch.tensor([x.shape[1]]))
        return LatentMotionTokens(tokens=z[0], source_len=x.shape[1])

    def decode(self, z: LatentMotionTokens) -> torch.Tensor:
        out = self.decode_batch(
            z.tokens[None], torch.tensor([z.tokens.shape[0]]), z.source_len
        )
        return out[0]


def pad_batch(seqs: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    width = seqs[0].shape[-1]
    out = torch.zeros(len(seqs), int(lengths.max()), width)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s)
    return out, lengths


def masked_smooth_l1(pred: torch.Tensor, target: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    m = _length_mask(lengths, pred.shape[1]).transpose(1, 2).expand_as(pred).bool()
    return smooth_l1(pred[m], target[m])


@dataclass
class AETrainResult:
    model: MotionAutoencoder
    stats: FeatureStats
    losses: list[float] = field(default_factory=list)


def train_autoencoder(
    corpus: list[np.ndarray],
    cfg: AEConfig,
    epochs: int | None = None,
    seed: int = 0,
    stats: FeatureStats | None = None,
    log=None,
) -> AETrainResult:
    """Fit the auto-encoder on raw (unnormalised) training features.

    ``corpus`` must be the training split only; normalisation statistics are
    computed from it. ``losses`` holds the epoch-mean reconstruction loss.
    """
    if not corpus:
        raise EmptyCorpusError("autoencoder training needs at least one sequence")
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(seed)
    stats = stats or FeatureStats.fit(corpus)
    data = [normalize(f, stats) for f in corpus]
    model = MotionAutoencoder(cfg)
    opt = WarmupAdam(model.parameters(), lr=cfg.lr, warmup_steps=cfg.warmup_steps)
    rng = np.random.default_rng(seed)
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(data))
        tot, cnt = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            x, lengths = pad_batch([data[i] for i in order[b : b + cfg.batch_size]])
            z, zl = model.encode_batch(x, lengths)
            rec = model.decode_batch(z, zl, x.shape[1])
            loss = masked_smooth_l1(rec, x, lengths)
            opt.zero_grad()
            backward(loss)
            opt.step()
            tot += loss.item() * len(lengths)
            cnt += len(lengths)
        losses.append(tot / cnt)
        if log is not None:
            log(ep, losses[-1])
    return AETrainResult(model=model, stats=stats, losses=losses)


@torch.no_grad()
def evaluate_reconstruction(model: MotionAutoencoder, feats: list[np.ndarray], stats: FeatureStats) -> float:
    data = [normalize(f, stats) for f in feats]
    tot, cnt = 0.0, 0
    for b in range(0, len(data), 64):
        x, lengths = pad_batch(data[b : b + 64])
        z, zl = model.encode_batch(x, lengths)
        rec = model.decode_batch(z, zl, x.shape[1])
        tot += float(masked_smooth_l1(rec, x, lengths)) * len(lengths)
        cnt += len(lengths)
    return tot / cnt
