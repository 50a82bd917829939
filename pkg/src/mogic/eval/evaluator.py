"""Contrastive text-motion evaluator and the full metrics report."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..autoencoder import pad_batch
from ..conditioning import N_BUCKETS, HashTokenizer
from ..config import EvalConfig
from ..motion_repr import FEATURE_DIM, FeatureStats, normalize
from .metrics import (
    GaussianStats,
    bootstrap,
    corpus_bleu,
    diversity,
    fid,
    matching_score,
    mean_rouge_l,
    r_precision,
)

MIN_PAIRS = 200


class CorpusTooSmallError(ValueError):
    pass


class MotionEncoder(nn.Module):
    def __init__(self, hidden: int, dim: int) -> None:
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv1d(FEATURE_DIM, hidden, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, hidden, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.gru = nn.GRU(hidden, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)
        lens = ((lengths // 2) // 2).clamp(min=1).clamp(max=h.shape[1])
        packed = nn.utils.rnn.pack_padded_sequence(h, lens, batch_first=True, enforce_sorted=False)
        _, hn = self.gru(packed)
        return F.normalize(self.out(torch.cat([hn[0], hn[1]], dim=-1)), dim=-1)


class TextEncoder(nn.Module):
    """Frozen hash-bucket word vectors followed by a trained bi-GRU."""

    def __init__(self, hidden: int, dim: int, seed: int = 7, word_dim: int = 64) -> None:
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("table", torch.randn(N_BUCKETS, word_dim, generator=g))
        self.gru = nn.GRU(word_dim, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, dim)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.table[ids]
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, hn = self.gru(packed)
        return F.normalize(self.out(torch.cat([hn[0], hn[1]], dim=-1)), dim=-1)


class EvaluatorModel(nn.Module):
    def __init__(self, cfg: EvalConfig, stats: FeatureStats) -> None:
        super().__init__()
        self.cfg = cfg
        self.stats = stats
        self.tokenizer = HashTokenizer()
        self.motion = MotionEncoder(cfg.hidden, cfg.dim)
        self.text = TextEncoder(cfg.hidden, cfg.dim)

    def _ids(self, captions: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [self.tokenizer.encode(c)[0] for c in captions]
        lens = torch.tensor([len(s) for s in seqs])
        ids = torch.zeros(len(seqs), int(lens.max()), dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
        return ids, lens

    def embed_motion_batch(self, feats: list[np.ndarray]) -> torch.Tensor:
        x, lens = pad_batch([normalize(f, self.stats) for f in feats])
        return self.motion(x, lens)

    def embed_text_batch(self, captions: list[str]) -> torch.Tensor:
        return self.text(*self._ids(captions))

    @torch.no_grad()
    def embed_motions(self, feats: list[np.ndarray], batch: int = 256) -> np.ndarray:
        self.eval()
        return np.concatenate(
            [self.embed_motion_batch(feats[b : b + batch]).numpy() for b in range(0, len(feats), batch)]
        )

    @torch.no_grad()
    def embed_texts(self, captions: list[str], batch: int = 256) -> np.ndarray:
        self.eval()
        return np.concatenate(
            [self.embed_text_batch(captions[b : b + batch]).numpy() for b in range(0, len(captions), batch)]
        )


def contrastive_loss(t: torch.Tensor, m: torch.Tensor, temperature: float) -> torch.Tensor:
    logits = t @ m.T / temperature
    target = torch.arange(len(t))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class EvaluatorTrainResult:
    model: EvaluatorModel
    losses: list[float] = field(default_factory=list)


def train_evaluator(
    feats: list[np.ndarray], captions: list[str], cfg: EvalConfig | None = None, log=None
) -> EvaluatorTrainResult:
    """Fit both encoders with a symmetric InfoNCE loss on raw features/captions."""
    cfg = cfg or EvalConfig()
    if len(feats) != len(captions):
        raise ValueError("features and captions must pair up")
    if len(feats) < MIN_PAIRS:
        raise CorpusTooSmallError(f"evaluator needs >= {MIN_PAIRS} pairs, got {len(feats)}")
    torch.manual_seed(cfg.seed)
    model = EvaluatorModel(cfg, FeatureStats.fit(feats))
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    model.train()
    for ep in range(cfg.epochs):
        order = rng.permutation(len(feats))
        tot, cnt = 0.0, 0
        for b in range(0, len(order) - 1, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            if len(idx) < 2:
                continue
            m = model.embed_motion_batch([feats[i] for i in idx])
            t = model.embed_text_batch([captions[i] for i in idx])
            loss = contrastive_loss(t, m, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            cnt += len(idx)
        losses.append(tot / cnt)
        if log is not None:
            log(ep, losses[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return EvaluatorTrainResult(model, losses)


def save_evaluator(path: Path | str, ev: EvaluatorModel) -> None:
    torch.save(
        {"state": ev.state_dict(), "cfg": ev.cfg.__dict__, "mean": ev.stats.mean, "std": ev.stats.std},
        path,
    )


def load_evaluator(path: Path | str) -> EvaluatorModel:
    blob = torch.load(path, weights_only=False)
    ev = EvaluatorModel(EvalConfig(**blob["cfg"]), FeatureStats(blob["mean"], blob["std"]))
    ev.load_state_dict(blob["state"])
    ev.eval()
    for p in ev.parameters():
        p.requires_grad_(False)
    return ev


# -- report ----------------------------------------------------------------------

def metrics_report(
    ev: EvaluatorModel,
    real_feats: list[np.ndarray],
    gen_feats: list[np.ndarray],
    captions: list[str],
    cand_ids: list[list[int]] | None = None,
    ref_ids: list[list[int]] | None = None,
    reps: int | None = None,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Bootstrap ``{metric: {mean, ci95}}`` over generation, retrieval and caption metrics.

    ``gen_feats[i]`` is the motion generated for ``captions[i]``;
    ``cand_ids``/``ref_ids`` are intention predictions and references.
    """
    cfg = ev.cfg
    reps = cfg.bootstrap if reps is None else reps
    m_real = ev.embed_motions(real_feats)
    m_gen = ev.embed_motions(gen_feats)
    t = ev.embed_texts(captions)
    n = len(captions)
    pool = min(cfg.pool_size, n)

    def rp(k):
        return lambda idx: r_precision(t[idx], m_gen[idx], pool, (k,), seed)[k]

    rep = {
        "fid": bootstrap(lambda idx: fid(GaussianStats.from_features(m_real[idx]), GaussianStats.from_features(m_gen[idx])), n, reps, seed),
        "r_precision_top1": bootstrap(rp(1), n, reps, seed),
        "r_precision_top2": bootstrap(rp(2), n, reps, seed),
        "r_precision_top3": bootstrap(rp(3), n, reps, seed),
        "matching_score": bootstrap(lambda idx: matching_score(t[idx], m_gen[idx]), n, reps, seed),
        "diversity": bootstrap(lambda idx: diversity(m_gen[idx], cfg.n_pairs, seed), n, reps, seed),
    }
    if cand_ids is not None and ref_ids is not None:
        k = len(cand_ids)
        rep["bleu1"] = bootstrap(lambda idx: corpus_bleu([cand_ids[i] for i in idx], [ref_ids[i] for i in idx], 1), k, reps, seed)
        rep["bleu4"] = bootstrap(lambda idx: corpus_bleu([cand_ids[i] for i in idx], [ref_ids[i] for i in idx], 4), k, reps, seed)
        rep["rouge_l"] = bootstrap(lambda idx: mean_rouge_l([cand_ids[i] for i in idx], [ref_ids[i] for i in idx]), k, reps, seed)
    return rep


def write_report(path: Path | str, report: dict, config_text: str | None = None) -> None:
    out = dict(report)
    if config_text is not None:
        out["config"] = config_text
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
