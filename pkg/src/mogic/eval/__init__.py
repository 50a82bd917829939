"""Evaluation: feature-space metrics and the contrastive evaluator."""
from .evaluator import (
    CorpusTooSmallError,
    EvaluatorModel,
    load_evaluator,
    metrics_report,
    save_evaluator,
    train_evaluator,
    write_report,
)
from .metrics import (
    GaussianStats,
    bleu,
    bootstrap,
    corpus_bleu,
    diversity,
    fid,
    fid_from_features,
    matching_score,
    mean_rouge_l,
    r_precision,
    rouge_l,
)

__all__ = [
    "CorpusTooSmallError",
    "EvaluatorModel",
    "GaussianStats",
    "bleu",
    "bootstrap",
    "corpus_bleu",
    "diversity",
    "fid",
    "fid_from_features",
    "load_evaluator",
    "matching_score",
    "mean_rouge_l",
    "metrics_report",
    "r_precision",
    "rouge_l",
    "save_evaluator",
    "train_evaluator",
    "write_report",
]
