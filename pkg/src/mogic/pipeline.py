"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AETrainResult, train_autoencoder
from .config import RunConfig, SampleConfig
from .eval.evaluator import EvaluatorModel, metrics_report
from .eval.metrics import corpus_bleu
from .model import LatentItem, MoGIC
from .motion_repr import extract_features
from .synthdata import CorpusRecord, continuations, load_corpus
from .training import Trainer, generate_from_items, predict_intentions


@dataclass
class SplitData:
    records: list[CorpusRecord]
    feats: list[np.ndarray]

    @property
    def captions(self) -> list[str]:
        return [r.caption for r in self.records]


def load_splits(manifest: Path | str) -> dict[str, SplitData]:
    recs = load_corpus(manifest)
    out = {}
    for split in ("train", "val", "test"):
        rs = [r for r in recs if r.split == split]
        out[split] = SplitData(rs, [extract_features(r.motion) for r in rs])
    return out


def build_model(cfg: RunConfig, ae: AETrainResult, train_feats: list[np.ndarray], cond_seed: int = 1234) -> MoGIC:
    """Wrap a trained auto-encoder into a fresh generator with fitted latent stats."""
    model = MoGIC(cfg, cond_seed=cond_seed)
    model.ae.load_state_dict(ae.model.state_dict())
    model.set_feature_stats(ae.stats)
    model.freeze_autoencoder()
    model.fit_latent_stats(train_feats)
    return model


def fit_autoencoder(cfg: RunConfig, train: SplitData, seed: int = 0, log=None) -> AETrainResult:
    return train_autoencoder(train.feats, cfg.ae, seed=seed, log=log)


def train_generator(
    model: MoGIC, cfg: RunConfig, items: list[LatentItem], log_path: Path | str | None = None, **fit_kw
) -> Trainer:
    torch.manual_seed(cfg.train.seed)
    trainer = Trainer(model, cfg.train, items, log_path=log_path)
    trainer.fit(**fit_kw)
    return trainer


def intent_metrics(model: MoGIC, items: list[LatentItem], seed: int = 0) -> dict[str, float]:
    """Second-clause accuracy and caption overlap of intention predictions.

    ``chance`` is the exact accuracy of guessing uniformly among the
    continuations the generator pairs with each item's first clause.
    ``bleu1_shuffled`` scores the same predictions against a seeded
    permutation of the references (the negative control).
    """
    preds = predict_intentions(model, items)
    refs = [it.text_ids for it in items]
    tok = model.cond.tokenizer
    hits = []
    for p, it in zip(preds, items):
        kinds = tok.clause_kinds(p)
        hits.append(len(kinds) >= 2 and kinds[1] == it.kinds[1])
    chance = float(np.mean([1.0 / len(continuations(it.kinds[0])) for it in items]))
    perm = np.random.default_rng(seed).permutation(len(items))
    return {
        "clause2_accuracy": float(np.mean(hits)),
        "chance": chance,
        "bleu1": corpus_bleu(preds, refs, 1),
        "bleu1_shuffled": corpus_bleu(preds, [refs[i] for i in perm], 1),
        "bleu4": corpus_bleu(preds, refs, 4),
    }


def evaluate_generator(
    model: MoGIC,
    ev: EvaluatorModel,
    items: list[LatentItem],
    real_feats: list[np.ndarray],
    sample: SampleConfig,
    task: str = "l2m",
    seed: int = 0,
    with_intent: bool = True,
    reps: int | None = None,
) -> dict:
    """Generate for every item and build the bootstrap metrics report."""
    gen_norm = generate_from_items(model, items, task, sample, seed=seed)
    stats = model.feature_stats
    gen_raw = [g * stats.std + stats.mean for g in gen_norm]
    cand = ref = None
    if with_intent:
        cand = predict_intentions(model, items)
        ref = [it.text_ids for it in items]
    return metrics_report(ev, real_feats, gen_raw, [it.caption for it in items], cand, ref, reps=reps, seed=seed)
