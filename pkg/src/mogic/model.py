"""The assembled generator: frozen auto-encoder, condition encoder, CMT and both heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import MotionAutoencoder, pad_batch
from .cmt import ConditionalMaskedTransformer
from .conditioning import EOS_ID, PAD_ID, ConditionBundle, ConditionEncoder
from .config import RunConfig
from .heads import IntentionHead, MotionGenerationHead
from .motion_repr import FEATURE_DIM, FeatureStats, extract_features, normalize
from .synthdata import CorpusRecord


class MoGIC(nn.Module):
    """Container for every trainable and frozen part of the generator.

    Normalisation statistics live in buffers so a checkpoint is
    self-contained: ``feat_mean/feat_std`` for motion features and
    ``lat_mean/lat_std`` for auto-encoder latents (the generator works on
    standardised latents).
    """

    def __init__(self, cfg: RunConfig, cond_seed: int = 1234) -> None:
        super().__init__()
        self.cfg = cfg
        d_m = cfg.ae.latent_dim
        self.ae = MotionAutoencoder(cfg.ae)
        self.cond = ConditionEncoder(cfg.cmt.width, seed=cond_seed, max_text_len=cfg.iph.max_len)
        self.cmt = ConditionalMaskedTransformer(cfg.cmt, d_m)
        self.mgh = MotionGenerationHead(cfg.mgh, d_m, cfg.cmt.width)
        self.iph = IntentionHead(cfg.iph, cfg.cmt.width)
        self.register_buffer("feat_mean", torch.zeros(FEATURE_DIM))
        self.register_buffer("feat_std", torch.ones(FEATURE_DIM))
        self.register_buffer("lat_mean", torch.zeros(d_m))
        self.register_buffer("lat_std", torch.ones(d_m))

    # -- statistics --------------------------------------------------------
    @property
    def feature_stats(self) -> FeatureStats:
        return FeatureStats(self.feat_mean.numpy().copy(), self.feat_std.numpy().copy())

    def set_feature_stats(self, stats: FeatureStats) -> None:
        self.feat_mean.copy_(torch.as_tensor(stats.mean))
        self.feat_std.copy_(torch.as_tensor(stats.std))

    def freeze_autoencoder(self) -> None:
        for p in self.ae.parameters():
            p.requires_grad_(False)

    # -- latent conversion -------------------------------------------------
    @torch.no_grad()
    def encode_features(self, feats: list[np.ndarray], batch: int = 128) -> list[torch.Tensor]:
        """Raw features -> standardised latent token sequences."""
        out = []
        stats = self.feature_stats
        for b in range(0, len(feats), batch):
            x, lengths = pad_batch([normalize(f, stats) for f in feats[b : b + batch]])
            z, zl = self.ae.encode_batch(x, lengths)
            for i in range(len(zl)):
                out.append(z[i, : int(zl[i])].clone())
        return [(z - self.lat_mean) / self.lat_std for z in out]

    @torch.no_grad()
    def decode_latents(self, latents: list[torch.Tensor], n_frames: list[int]) -> list[np.ndarray]:
        """Standardised latents -> normalised features cropped to ``n_frames``."""
        raw = [z * self.lat_std + self.lat_mean for z in latents]
        lens = torch.tensor([z.shape[0] for z in raw])
        zpad = torch.zeros(len(raw), int(lens.max()), raw[0].shape[-1])
        for i, z in enumerate(raw):
            zpad[i, : z.shape[0]] = z
        out_len = max(n_frames)
        feats = self.ae.decode_batch(zpad, lens, out_len)
        return [feats[i, :n].numpy() for i, n in enumerate(n_frames)]

    @torch.no_grad()
    def fit_latent_stats(self, feats: list[np.ndarray]) -> None:
        self.lat_mean.zero_()
        self.lat_std.fill_(1.0)
        z = torch.cat(self.encode_features(feats), dim=0).double()
        self.lat_mean.copy_(z.mean(0).float())
        self.lat_std.copy_(z.std(0).clamp_min(1e-4).float())

    # -- forward pieces ----------------------------------------------------
    def backbone(
        self,
        latents: torch.Tensor,
        masked: torch.Tensor,
        valid: torch.Tensor,
        bundle: ConditionBundle,
    ) -> torch.Tensor:
        return self.cmt(latents, masked, bundle, valid)


@dataclass
class LatentItem:
    """One training/eval example with pre-encoded standardised latents."""

    id: str
    latents: torch.Tensor  # (l', d_m)
    n_frames: int  # feature frames the latents decode to
    text_ids: list[int]
    vision: np.ndarray  # (p, 8)
    caption: str
    kinds: tuple[str, str]
    split: str

    @property
    def length(self) -> int:
        return int(self.latents.shape[0])

    def intent_target(self) -> list[int]:
        return list(self.text_ids) + [EOS_ID]


def build_items(model: MoGIC, records: list[CorpusRecord], feats: list[np.ndarray] | None = None) -> list[LatentItem]:
    if feats is None:
        feats = [extract_features(r.motion) for r in records]
    lat = model.encode_features(feats)
    items = []
    for r, f, z in zip(records, feats, lat):
        ids, _ = model.cond.text_ids(r.caption)
        items.append(
            LatentItem(
                id=r.id,
                latents=z,
                n_frames=len(f),
                text_ids=ids,
                vision=r.vision,
                caption=r.caption,
                kinds=tuple(r.primitives),
                split=r.split,
            )
        )
    return items


def pad_targets(seqs: list[list[int]]) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def truncate_vision(vision: np.ndarray, n_frames: int, fps: float = 30.0) -> np.ndarray:
    """Keep only the per-second descriptors already observed after ``n_frames``."""
    seconds = n_frames / fps
    keep = min(len(vision), int(math.floor(seconds + 1e-9)) + 1)
    return vision[: max(1, keep)]
