"""Retrieval and VQA evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .rdan import vqa_accuracy


@dataclass
class RetrievalMetrics:
    recall_at: dict = field(default_factory=dict)
    median_rank: int = 0
    ranks: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "median_rank": self.median_rank,
            "n_queries": len(self.ranks),
        }


def ground_truth_ranks(scores: np.ndarray, truth: Sequence[int], gallery_ids: Sequence[int] | None = None) -> np.ndarray:
    """1-based rank of ``truth[q]`` (a gallery column) within row ``q``.

    Rows are sorted by score descending, ties broken by gallery item id
    ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise ValueError("empty gallery")
    n_gallery = scores.shape[1]
    ids = np.arange(n_gallery) if gallery_ids is None else np.asarray(gallery_ids)
    truth = np.asarray(truth, dtype=np.int64)
    ranks = np.empty(len(truth), dtype=np.int64)
    for q, t in enumerate(truth):
        row = scores[q]
        s = row[t]
        ahead = (row > s) | ((row == s) & (ids < ids[t]))
        ranks[q] = 1 + int(ahead.sum())
    return ranks


def lower_median(values: Sequence[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def retrieval_metrics(ranks: Sequence[int], ks: Sequence[int] = (1, 5, 10)) -> RetrievalMetrics:
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("no queries")
    n = len(ranks)
    recall = {k: float(Fraction(sum(r <= k for r in ranks), n)) for k in sorted(ks)}
    return RetrievalMetrics(recall_at=recall, median_rank=lower_median(ranks), ranks=ranks)


def mean_vqa_accuracy(predicted: Sequence[int], label_counts: Sequence[Mapping[int, int]]) -> float:
    """Average per-question accuracy, reduced exactly as a rational."""
    if len(predicted) != len(label_counts):
        raise ValueError("prediction/label count mismatch")
    if not predicted:
        raise ValueError("no questions")
    total = sum((Fraction(min(c.get(int(p), 0), 3), 3) for p, c in zip(predicted, label_counts)), Fraction(0))
    return float(total / len(predicted))


__all__ = [
    "RetrievalMetrics",
    "ground_truth_ranks",
    "lower_median",
    "mean_vqa_accuracy",
    "retrieval_metrics",
    "vqa_accuracy",
]
