"""Language / vision condition embeddings.

The text and vision encoders are frozen stand-ins for pretrained models: a
hash-bucketed word table and a fixed random MLP over per-second scene
descriptors. Only the vision pooling query/projections and the
missing-modality placeholders are trainable.
"""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .numerics import sinusoidal_embedding, softmax
from .synthdata import MAX_VISION_FRAMES, PHRASES, VISION_DIM, match_clauses, vocabulary

N_BUCKETS = 1024
MAX_TEXT_LEN = 32
PAD_ID, BOS_ID, EOS_ID = N_BUCKETS, N_BUCKETS + 1, N_BUCKETS + 2
VOCAB_SIZE = N_BUCKETS + 3

# rough scale of each descriptor channel, applied before the frozen projection
_VISION_SCALE = np.array([3.0, 3.0, 1.0, 1.0, 3.0, 3.0, 2.0, 1.0], dtype=np.float32)


class EmptyTextError(ValueError):
    pass


class VisionRangeError(ValueError):
    pass


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


class HashTokenizer:
    """Word-level tokenizer hashing each word into a fixed bucket range.

    No stemming: "walk" and "walks" are different words. A reverse table
    remembers the first word seen per bucket for detokenisation.
    """

    def __init__(
        self, n_buckets: int = N_BUCKETS, max_len: int = MAX_TEXT_LEN, words: list[str] | None = None
    ) -> None:
        self.n_buckets = n_buckets
        self.max_len = max_len
        self.reverse: dict[int, str] = {}
        # prime the reverse table so decoding works in a fresh process
        for w in vocabulary() if words is None else words:
            self.word_id(w)

    def word_id(self, word: str) -> int:
        i = zlib.crc32(word.encode("utf-8")) % self.n_buckets
        self.reverse.setdefault(i, word)
        return i

    def encode(self, text: str) -> tuple[list[int], bool]:
        words = _words(text)
        if not words:
            raise EmptyTextError("caption is empty")
        ids = [self.word_id(w) for w in words]
        truncated = len(ids) > self.max_len
        return ids[: self.max_len], truncated

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.reverse.get(i, f"<{i}>"))
        return " ".join(out)

    def clause_kinds(self, ids) -> list[str]:
        """Primitive kinds named by a token-id sequence, matched in id space
        so bucket collisions in the reverse table cannot corrupt the parse."""
        ids = [int(i) for i in ids]
        if EOS_ID in ids:
            ids = ids[: ids.index(EOS_ID)]
        table = {k: [[self.word_id(w) for w in _words(ph)] for ph in v] for k, v in PHRASES.items()}
        return match_clauses(ids, table)


@dataclass
class TextTokens:
    ids: list[int]
    tokens: torch.Tensor  # (l_t, d)
    global_: torch.Tensor  # (d,)
    truncated: bool = False


@dataclass
class VisionFrames:
    tokens: torch.Tensor  # (p, d)
    global_: torch.Tensor | None = None


@dataclass
class ConditionBundle:
    tokens: torch.Tensor  # (B, Lc, d) = [vision-or-null ; text-or-null]
    mask: torch.Tensor  # (B, Lc) True where valid
    global_: torch.Tensor  # (B, d)
    has_text: torch.Tensor  # (B,) bool
    has_vision: torch.Tensor  # (B,) bool
    n_vision_slots: torch.Tensor  # (B,) index where text starts


class ConditionEncoder(nn.Module):
    def __init__(self, dim: int, seed: int = 1234, max_text_len: int = MAX_TEXT_LEN) -> None:
        super().__init__()
        self.dim = dim
        self.tokenizer = HashTokenizer(max_len=max_text_len)
        g = torch.Generator().manual_seed(seed)
        # frozen encoders live in buffers so they never receive gradients
        self.register_buffer("text_table", torch.randn(N_BUCKETS, dim, generator=g))
        self.register_buffer(
            "text_pos", 0.5 * sinusoidal_embedding(torch.arange(max_text_len, dtype=torch.float32), dim)
        )
        self.register_buffer("cls_proj", torch.randn(dim, dim, generator=g) / math.sqrt(dim))
        hidden = 4 * dim
        self.register_buffer("vis_w1", torch.randn(VISION_DIM, hidden, generator=g))
        self.register_buffer("vis_b1", 0.5 * torch.randn(hidden, generator=g))
        self.register_buffer("vis_w2", torch.randn(hidden, dim, generator=g) / math.sqrt(hidden))
        self.register_buffer(
            "vis_index", 0.5 * sinusoidal_embedding(torch.arange(MAX_VISION_FRAMES, dtype=torch.float32), dim)
        )
        self.register_buffer("vis_scale", torch.as_tensor(_VISION_SCALE))

        self.q_v = nn.Parameter(torch.randn(dim) * 0.02)
        self.pool_k = nn.Linear(dim, dim, bias=False)
        self.pool_v = nn.Linear(dim, dim, bias=False)
        self.null_vision_tok = nn.Parameter(torch.randn(dim) * 0.02)
        self.null_text_tok = nn.Parameter(torch.randn(dim) * 0.02)
        self.null_vision_g = nn.Parameter(torch.randn(dim) * 0.02)
        self.null_text_g = nn.Parameter(torch.randn(dim) * 0.02)

    # -- text ------------------------------------------------------------
    def text_ids(self, text: str) -> tuple[list[int], bool]:
        return self.tokenizer.encode(text)

    def embed_ids(self, ids: list[int] | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ids = torch.as_tensor(ids, dtype=torch.long)
        emb = self.text_table[ids]
        tokens = emb + self.text_pos[: len(ids)]
        glob = emb.mean(dim=0) @ self.cls_proj
        return tokens, glob

    def embed_text(self, text: str) -> TextTokens:
        ids, truncated = self.text_ids(text)
        tokens, glob = self.embed_ids(ids)
        return TextTokens(ids=ids, tokens=tokens, global_=glob, truncated=truncated)

    # -- vision ----------------------------------------------------------
    def encode_vision(self, frames: np.ndarray | torch.Tensor) -> VisionFrames:
        x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
        if x.ndim != 2 or x.shape[1] != VISION_DIM:
            raise VisionRangeError(f"vision descriptors must be (p, {VISION_DIM})")
        p = x.shape[0]
        if not 1 <= p <= MAX_VISION_FRAMES:
            raise VisionRangeError(f"need 1..{MAX_VISION_FRAMES} frames, got {p}")
        h = torch.tanh((x / self.vis_scale) @ self.vis_w1 + self.vis_b1)
        return VisionFrames(tokens=h @ self.vis_w2)

    def pool_vision(self, z_v: torch.Tensor, q: torch.Tensor | None = None) -> torch.Tensor:
        """Single-query attention over frame tokens; ``z_v`` is (p, d)."""
        q = self.q_v if q is None else q
        k = self.pool_k(z_v)
        v = self.pool_v(z_v)
        w = softmax((k @ q) / math.sqrt(self.dim), axis=0)
        return w @ v

    # -- bundle ----------------------------------------------------------
    def assemble(
        self,
        texts: list[list[int] | None],
        visions: list[np.ndarray | torch.Tensor | None],
    ) -> ConditionBundle:
        """Batch condition tokens as ``[vision ; text]`` with null placeholders.

        ``texts`` holds token-id lists (``None`` for no text); ``visions`` the
        raw descriptor arrays (``None`` for no vision).
        """
        if len(texts) != len(visions):
            raise ValueError("texts and visions must have equal length")
        rows, globs, n_vis = [], [], []
        for ids, vis in zip(texts, visions):
            if vis is not None:
                vf = self.encode_vision(vis)
                z_v = vf.tokens + self.vis_index[: vf.tokens.shape[0]]
                g_v = self.pool_vision(z_v)
            else:
                z_v = self.null_vision_tok[None]
                g_v = self.null_vision_g
            if ids is not None and len(ids) > 0:
                z_t, g_t = self.embed_ids(ids)
            else:
                z_t = self.null_text_tok[None]
                g_t = self.null_text_g
            rows.append(torch.cat([z_v, z_t], dim=0))
            globs.append(g_t + g_v)
            n_vis.append(z_v.shape[0])
        lc = max(r.shape[0] for r in rows)
        b = len(rows)
        tokens = torch.zeros(b, lc, self.dim)
        mask = torch.zeros(b, lc, dtype=torch.bool)
        padded = []
        for i, r in enumerate(rows):
            if r.shape[0] < lc:
                r = torch.cat([r, torch.zeros(lc - r.shape[0], self.dim)], dim=0)
            padded.append(r)
            mask[i, : rows[i].shape[0]] = True
        tokens = torch.stack(padded)
        return ConditionBundle(
            tokens=tokens,
            mask=mask,
            global_=torch.stack(globs),
            has_text=torch.tensor([t is not None and len(t) > 0 for t in texts]),
            has_vision=torch.tensor([v is not None for v in visions]),
            n_vision_slots=torch.tensor(n_vis),
        )
