"""Reasoning network: joint-memory dual attention with an answer classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .base import AttentionTrace, DualAttentionBase
from .params import ParamStore, glorot_uniform
from .tensor import Tensor
from .text import EncodedText


@dataclass
class RDanOutput:
    logits: Tensor  # (..., C)
    probs: np.ndarray  # (..., C)
    memory: Tensor  # m^(K)
    memories: list  # m^(0..K)
    trace: AttentionTrace


class RDan(DualAttentionBase):
    kind = "rdan"

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        super().init_params(params, rng)
        c = self.config
        params.add("rdan/ans/W", glorot_uniform(rng, c.n_answers, c.dim))
        params.add("rdan/ans/b", np.zeros(c.n_answers))

    def init_joint_memory(self, regions: Tensor, text: EncodedText) -> Tensor:
        """m^(0) = v^(0) * u^(0)."""
        return T.mul(self.global_visual(regions), self.global_textual(text))

    def step(self, memory: Tensor, regions: Tensor, text: EncodedText, k: int, dropout=0.0, rng=None):
        """One dual-attention step; both modalities read the same memory."""
        v = A.visual_attend(regions, memory, self.visual_step(k), k, dropout, rng)
        u = A.textual_attend(text, memory, self.textual_step(k), k, dropout, rng)
        return T.add(memory, T.mul(v.context, u.context)), v, u

    def forward(
        self,
        regions,
        ids,
        valid_len,
        dropout: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> RDanOutput:
        regions = self.regions_tensor(regions)
        text = self.encode_text(ids, valid_len)
        m = self.init_joint_memory(regions, text)
        memories = [m]
        trace = AttentionTrace()
        for k in range(1, self.config.steps + 1):
            m, v, u = self.step(m, regions, text, k, dropout, rng)
            memories.append(m)
            trace.visual.append(v.weights.data)
            trace.textual.append(u.weights.data)
        logits = T.affine(m, self.params["rdan/ans/W"], self.params["rdan/ans/b"])
        probs = T.softmax_masked(logits).data
        return RDanOutput(logits, probs, m, memories, trace)

    def loss(self, regions, ids, valid_len, answers, dropout=0.0, rng=None) -> Tensor:
        """Mean cross-entropy over the batch."""
        out = self.forward(regions, ids, valid_len, dropout, rng)
        return T.mean(cross_entropy_loss(out.logits, answers))


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    return T.cross_entropy(logits, target)


def predict_answer(p, candidates: Optional[Iterable[int]] = None) -> np.ndarray:
    """Argmax over the last axis, lowest index on ties.

    With ``candidates`` the argmax is restricted to that id set (the
    multiple-choice setting).
    """
    p = np.asarray(p, dtype=np.float64)
    if candidates is None:
        return np.argmax(p, axis=-1)
    cand = np.array(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if cand.size == 0:
        raise ValueError("empty candidate set")
    return cand[np.argmax(p[..., cand], axis=-1)]


def vqa_accuracy(predicted: int, human_label_counts: Mapping[int, int]) -> float:
    """min(#annotators who gave ``predicted`` / 3, 1)."""
    count = human_label_counts.get(int(predicted), 0)
    if count < 0:
        raise ValueError("negative annotator count")
    return min(count / 3.0, 1.0)


def gold_counts(answer_id: int) -> dict[int, int]:
    """Annotator counts for a single-gold synthetic item."""
    return {int(answer_id): 3}
