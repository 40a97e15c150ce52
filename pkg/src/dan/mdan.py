"""Matching network: separate per-modality memories and a joint embedding space.

Because the visual memory never sees text and vice versa, the stepwise
similarity sum equals the inner product of the concatenated per-step
context vectors.  Retrieval uses that form so each item is embedded once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .base import AttentionTrace, DualAttentionBase
from .tensor import Tensor
from .text import EncodedText


@dataclass
class Embedding:
    z: Tensor  # (..., (K+1)·d)
    modality: str  # "image" or "text"
    contexts: list  # per-step context vectors, step 0 first
    weights: list  # per-step attention weights, steps 1..K


@dataclass
class Similarity:
    total: Tensor  # S
    per_step: list  # s^(0..K)
    visual_contexts: list
    textual_contexts: list
    trace: AttentionTrace


class MDan(DualAttentionBase):
    kind = "mdan"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.embed_counts = {"image": 0, "text": 0}

    def step(self, m_v: Tensor, m_u: Tensor, regions: Tensor, text: EncodedText, k: int, dropout=0.0, rng=None):
        """Returns (m_v, m_u, s_k, visual result, textual result)."""
        v = A.visual_attend(regions, m_v, self.visual_step(k), k, dropout, rng)
        u = A.textual_attend(text, m_u, self.textual_step(k), k, dropout, rng)
        return T.add(m_v, v.context), T.add(m_u, u.context), T.dot(v.context, u.context), v, u

    def similarity(self, regions, ids, valid_len) -> Similarity:
        """S = Σ_{k=0..K} v^(k)·u^(k), evaluated step by step."""
        regions = self.regions_tensor(regions)
        text = self.encode_text(ids, valid_len)
        m_v = self.global_visual(regions)
        m_u = self.global_textual(text)
        vs, us = [m_v], [m_u]
        per_step = [T.dot(m_v, m_u)]
        trace = AttentionTrace()
        for k in range(1, self.config.steps + 1):
            m_v, m_u, s, v, u = self.step(m_v, m_u, regions, text, k)
            vs.append(v.context)
            us.append(u.context)
            per_step.append(s)
            trace.visual.append(v.weights.data)
            trace.textual.append(u.weights.data)
        total = per_step[0]
        for s in per_step[1:]:
            total = T.add(total, s)
        return Similarity(total, per_step, vs, us, trace)

    def embed_image(self, regions, dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Embedding:
        """z_v = [v^(0); ...; v^(K)] from the visual pipeline alone."""
        regions = self.regions_tensor(regions)
        self.embed_counts["image"] += int(np.prod(regions.shape[:-2], dtype=np.int64))
        m = self.global_visual(regions)
        contexts, weights = [m], []
        for k in range(1, self.config.steps + 1):
            r = A.visual_attend(regions, m, self.visual_step(k), k, dropout, rng)
            m = T.add(m, r.context)
            contexts.append(r.context)
            weights.append(r.weights.data)
        return Embedding(T.concat(contexts), "image", contexts, weights)

    def embed_text(self, ids, valid_len, dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> Embedding:
        """z_u = [u^(0); ...; u^(K)] from the textual pipeline alone."""
        text = self.encode_text(ids, valid_len)
        self.embed_counts["text"] += int(np.prod(text.mask.shape[:-1], dtype=np.int64))
        m = self.global_textual(text)
        contexts, weights = [m], []
        for k in range(1, self.config.steps + 1):
            r = A.textual_attend(text, m, self.textual_step(k), k, dropout, rng)
            m = T.add(m, r.context)
            contexts.append(r.context)
            weights.append(r.weights.data)
        return Embedding(T.concat(contexts), "text", contexts, weights)

    def ranking_loss(self, pos_regions, pos_ids, pos_len, neg_regions, neg_ids, neg_len, margin=None) -> Tensor:
        """Bidirectional hinge loss summed over a batch of quadruplets."""
        z_v = self.embed_image(pos_regions).z
        z_u = self.embed_text(pos_ids, pos_len).z
        z_vn = self.embed_image(neg_regions).z
        z_un = self.embed_text(neg_ids, neg_len).z
        return _hinge_pairs(z_v, z_u, z_vn, z_un, self.config.margin if margin is None else margin)

    def ranking_loss_in_batch(
        self, regions, ids, valid_len, neg_image, neg_text, margin=None, dropout=0.0, rng=None
    ) -> Tensor:
        """Same loss with negatives drawn from the batch by index.

        Each image and sentence is embedded once and negative scores reuse
        those embeddings.
        """
        z_v = self.embed_image(regions, dropout, rng).z
        z_u = self.embed_text(ids, valid_len, dropout, rng).z
        z_vn = T.take(z_v, neg_image, axis=0)
        z_un = T.take(z_u, neg_text, axis=0)
        return _hinge_pairs(z_v, z_u, z_vn, z_un, self.config.margin if margin is None else margin)


def _hinge_pairs(z_v, z_u, z_vn, z_un, margin: float) -> Tensor:
    if z_v.shape[0] == 0:
        raise ValueError("empty batch")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pos = T.dot(z_v, z_u)
    gap = T.scale(pos, -1.0) + margin
    loss_img = T.hinge(T.add(gap, T.dot(z_vn, z_u)))
    loss_txt = T.hinge(T.add(gap, T.dot(z_v, z_un)))
    return T.sum_all(T.add(loss_img, loss_txt))


def sample_negatives(batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform in-batch negatives: indices of another item for image and text."""
    if batch_size < 2:
        raise ValueError("negative sampling needs a batch of at least 2")
    own = np.arange(batch_size)
    neg_img = (own + rng.integers(1, batch_size, size=batch_size)) % batch_size
    neg_txt = (own + rng.integers(1, batch_size, size=batch_size)) % batch_size
    return neg_img, neg_txt
