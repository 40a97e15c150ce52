"""Memory-conditioned soft attention over image regions and sentence tokens.

Both mechanisms score each item with a two-branch gated layer,

    h_n = tanh(W_x x_n + b_x) * tanh(W_m m + b_m)
    alpha = softmax_n(w_h . h_n + b_h)

and average the items under ``alpha``.  The visual context is additionally
projected with tanh(P . + b_P) into the text feature space; the textual
context is used as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .params import ParamStore, glorot_uniform
from .tensor import Tensor
from .text import EncodedText


@dataclass
class AttentionResult:
    weights: Tensor  # (..., n), on the simplex
    context: Tensor  # (..., d)
    step: int


@dataclass
class VisualStep:
    W_v: Tensor
    b_v: Tensor
    W_vm: Tensor
    b_vm: Tensor
    W_vh: Tensor
    b_vh: Tensor
    P: Tensor
    b_p: Tensor

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str) -> "VisualStep":
        return cls(**{f: params[f"{prefix}/{f}"] for f in cls.__dataclass_fields__})


@dataclass
class TextualStep:
    W_u: Tensor
    b_u: Tensor
    W_um: Tensor
    b_um: Tensor
    W_uh: Tensor
    b_uh: Tensor

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str) -> "TextualStep":
        return cls(**{f: params[f"{prefix}/{f}"] for f in cls.__dataclass_fields__})


def init_visual_step(params: ParamStore, prefix: str, dim: int, feature_dim: int, rng) -> None:
    params.add(f"{prefix}/W_v", glorot_uniform(rng, dim, feature_dim))
    params.add(f"{prefix}/b_v", np.zeros(dim))
    params.add(f"{prefix}/W_vm", glorot_uniform(rng, dim, dim))
    params.add(f"{prefix}/b_vm", np.zeros(dim))
    params.add(f"{prefix}/W_vh", glorot_uniform(rng, 1, dim))
    params.add(f"{prefix}/b_vh", np.zeros(1))
    params.add(f"{prefix}/P", glorot_uniform(rng, dim, feature_dim))
    params.add(f"{prefix}/b_p", np.zeros(dim))


def init_textual_step(params: ParamStore, prefix: str, dim: int, rng) -> None:
    params.add(f"{prefix}/W_u", glorot_uniform(rng, dim, dim))
    params.add(f"{prefix}/b_u", np.zeros(dim))
    params.add(f"{prefix}/W_um", glorot_uniform(rng, dim, dim))
    params.add(f"{prefix}/b_um", np.zeros(dim))
    params.add(f"{prefix}/W_uh", glorot_uniform(rng, 1, dim))
    params.add(f"{prefix}/b_uh", np.zeros(1))


def init_global_visual(params: ParamStore, prefix: str, dim: int, feature_dim: int, rng) -> None:
    params.add(f"{prefix}/P", glorot_uniform(rng, dim, feature_dim))
    params.add(f"{prefix}/b_p", np.zeros(dim))


def _dropout(h: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return T.mul(h, T.constant(keep))


def _attend(rows, mask, memory, W_x, b_x, W_m, b_m, W_h, b_h, dropout, rng):
    if rows.shape[-2] == 0:
        raise ValueError("attention over an empty set")
    item = T.tanh(T.affine(rows, W_x, b_x))
    mem = T.tanh(T.affine(memory, W_m, b_m))
    mem = T.reshape(mem, mem.shape[:-1] + (1, mem.shape[-1]))
    h = _dropout(T.mul(item, mem), dropout, rng)
    scores = T.affine(h, W_h, b_h)
    scores = T.reshape(scores, scores.shape[:-1])
    weights = T.softmax_masked(scores, mask)
    return weights, T.weighted_sum(weights, rows)


def visual_attend(
    regions: Tensor,
    memory: Tensor,
    p: VisualStep,
    step: int = 1,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> AttentionResult:
    """Attend over ``regions`` (..., N, D_v) given ``memory`` (..., d)."""
    weights, pooled = _attend(
        regions, None, memory, p.W_v, p.b_v, p.W_vm, p.b_vm, p.W_vh, p.b_vh, dropout, rng
    )
    context = T.tanh(T.affine(pooled, p.P, p.b_p))
    return AttentionResult(weights, context, step)


def textual_attend(
    text: EncodedText,
    memory: Tensor,
    p: TextualStep,
    step: int = 1,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> AttentionResult:
    """Attend over the valid tokens of ``text``; no projection afterwards."""
    if text.u.shape[-2] == 0:
        raise ValueError("attention over an empty sentence")
    weights, context = _attend(
        text.u, text.mask, memory, p.W_u, p.b_u, p.W_um, p.b_um, p.W_uh, p.b_uh, dropout, rng
    )
    return AttentionResult(weights, context, step)


def global_visual_context(regions: Tensor, P0: Tensor, b0: Tensor) -> Tensor:
    """tanh(P0 · mean_n(v_n) + b0)."""
    n = regions.shape[-2]
    if n == 0:
        raise ValueError("no regions")
    uniform = T.constant(np.full(regions.shape[:-1], 1.0 / n))
    return T.tanh(T.affine(T.weighted_sum(uniform, regions), P0, b0))


def global_textual_context(text: EncodedText) -> Tensor:
    """Mean of the valid rows of ``text.u``."""
    counts = text.mask.sum(axis=-1, keepdims=True)
    if (counts < 1).any():
        raise ValueError("no valid tokens")
    w = T.constant(np.where(text.mask, 1.0 / np.maximum(counts, 1), 0.0))
    return T.weighted_sum(w, text.u)
