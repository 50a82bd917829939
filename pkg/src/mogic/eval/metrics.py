"""Distribution, retrieval and caption-overlap metrics (pure numpy)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need a (n >= 2, d) feature matrix")
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((C1 C2)^{1/2})`` is evaluated as the sum of square roots of the
    eigenvalues of the symmetric matrix ``C1^{1/2} C2 C1^{1/2}`` (same
    spectrum as ``C1 C2``), with negative round-off eigenvalues clipped.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    s1 = _psd_sqrt(a.cov)
    m = s1 @ b.cov @ s1
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def fid_from_features(real: np.ndarray, gen: np.ndarray) -> float:
    return fid(GaussianStats.from_features(real), GaussianStats.from_features(gen))


def r_precision(
    text_feats: np.ndarray,
    motion_feats: np.ndarray,
    pool_size: int = 32,
    ks: Sequence[int] = (1, 2, 3),
    seed: int = 0,
) -> dict[int, float]:
    """Fraction of texts whose paired motion ranks within top-k of a pool.

    Each pool is the true motion plus ``pool_size - 1`` distractors drawn
    without replacement from the other pairs. Rank counts distractors
    strictly closer (Euclidean) than the true motion.
    """
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    n = len(t)
    if len(m) != n:
        raise ValueError("text and motion feature counts differ")
    if n < pool_size:
        raise ValueError(f"need at least {pool_size} pairs, got {n}")
    rng = np.random.default_rng(seed)
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        others = rng.choice(n - 1, pool_size - 1, replace=False)
        others = others + (others >= i)
        d_true = np.linalg.norm(t[i] - m[i])
        d_other = np.linalg.norm(m[others] - t[i], axis=1)
        ranks[i] = 1 + int((d_other < d_true).sum())
    return {k: float((ranks <= k).mean()) for k in ks}


def matching_score(text_feats: np.ndarray, motion_feats: np.ndarray) -> float:
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    if t.shape != m.shape:
        raise ValueError("text and motion features must have equal shapes")
    return float(np.linalg.norm(t - m, axis=1).mean())


def diversity(feats: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean distance between two independently drawn index sets."""
    x = np.asarray(feats, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("diversity needs at least 2 samples")
    rng = np.random.default_rng(seed)
    replace = n < n_pairs
    i = rng.choice(n, n_pairs, replace=replace)
    j = rng.choice(n, n_pairs, replace=replace)
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


# -- caption overlap -------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], n: int = 4) -> float:
    """Corpus BLEU@n (uniform weights, brevity penalty, no smoothing), in [0, 100]."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if any(len(r) == 0 for r in references):
        raise ValueError("empty reference")
    matches = [0] * n
    totals = [0] * n
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    for c, r in zip(candidates, references):
        c, r = list(c), list(r)
        for k in range(1, n + 1):
            cn, rn = _ngrams(c, k), _ngrams(r, k)
            matches[k - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            totals[k - 1] += max(len(c) - k + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def bleu(candidate: Sequence, reference: Sequence, n: int = 4) -> float:
    return corpus_bleu([candidate], [reference], n)


def _lcs(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """ROUGE-L F1 from the longest common subsequence."""
    if len(reference) == 0:
        raise ValueError("empty reference")
    lcs = _lcs(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def mean_rouge_l(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


# -- bootstrap -------------------------------------------------------------------

def bootstrap(
    fn: Callable[[np.ndarray], float], n: int, reps: int = 20, seed: int = 0
) -> dict[str, float]:
    """``fn`` receives resampled indices; returns ``{mean, ci95}`` over reps
    with ``ci95 = 1.96 * std``."""
    rng = np.random.default_rng(seed)
    vals = np.array([fn(rng.integers(0, n, n)) for _ in range(reps)])
    return {"mean": float(vals.mean()), "ci95": float(1.96 * vals.std())}
