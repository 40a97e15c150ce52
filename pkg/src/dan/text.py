"""Word embedding and bidirectional LSTM text encoding.

Sentences are right-padded with the reserved id 0.  The forward direction
runs over the valid prefix; the backward direction starts at the last valid
token from a zero state.  Padded rows of the output are exactly zero and
receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .params import ParamStore, glorot_uniform
from .tensor import Tensor

PAD = "<pad>"
GATES = ("i", "f", "o", "g")
FORGET_BIAS = 1.0


class Vocabulary:
    """Token list where the line number is the id; id 0 is padding."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            tokens = [PAD] + [t for t in tokens if t != PAD]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def encode(self, sentence: str | Sequence[str]) -> list[int]:
        words = sentence.split() if isinstance(sentence, str) else list(sentence)
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != 0]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def pad_batch(sequences: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id lists into an (B, T) array plus valid lengths."""
    lens = np.array([len(s) for s in sequences], dtype=np.int64)
    if (lens < 1).any():
        raise ValueError("empty sentence")
    width = int(lens.max()) if length is None else length
    if lens.max() > width:
        raise ValueError(f"sentence longer than {width} tokens")
    ids = np.zeros((len(sequences), width), dtype=np.int64)
    for row, s in enumerate(sequences):
        ids[row, : len(s)] = s
    return ids, lens


@dataclass
class LSTMCell:
    """Input (W), recurrent (U) and bias (b) parameters of the four gates."""

    W: dict
    U: dict
    b: dict

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str) -> "LSTMCell":
        return cls(
            W={g: params[f"{prefix}/W_{g}"] for g in GATES},
            U={g: params[f"{prefix}/U_{g}"] for g in GATES},
            b={g: params[f"{prefix}/b_{g}"] for g in GATES},
        )


def init_cell(params: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for g in GATES:
        params.add(f"{prefix}/W_{g}", glorot_uniform(rng, dim, dim))
        params.add(f"{prefix}/U_{g}", glorot_uniform(rng, dim, dim))
        params.add(f"{prefix}/b_{g}", np.full(dim, FORGET_BIAS if g == "f" else 0.0))


def init_encoder(params: ParamStore, prefix: str, dim: int, vocab_size: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}/M", glorot_uniform(rng, dim, vocab_size))
    init_cell(params, f"{prefix}/fwd", dim, rng)
    init_cell(params, f"{prefix}/bwd", dim, rng)


def embed_tokens(ids, M: Tensor) -> Tensor:
    """x_t = M w_t for one-hot w_t, i.e. column ``ids[t]`` of M."""
    return T.embed(ids, M)


def recurrent_step(x: Tensor, h: Tensor, c: Tensor, cell: LSTMCell) -> tuple[Tensor, Tensor]:
    pre = {g: T.add(T.affine(x, cell.W[g], cell.b[g]), T.affine(h, cell.U[g])) for g in GATES}
    i = T.sigmoid(pre["i"])
    f = T.sigmoid(pre["f"])
    o = T.sigmoid(pre["o"])
    g = T.tanh(pre["g"])
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


@dataclass
class EncodedText:
    u: Tensor  # (..., T, d)
    mask: np.ndarray  # (..., T) bool, True on valid tokens

    @property
    def valid_len(self) -> np.ndarray:
        return self.mask.sum(axis=-1)


def length_mask(valid_len, width: int) -> np.ndarray:
    valid_len = np.asarray(valid_len, dtype=np.int64)
    return np.arange(width) < valid_len[..., None]


def _run_direction(x: Tensor, mask: np.ndarray, cell: LSTMCell, order: range) -> list:
    dim = cell.b["i"].shape[0]
    zero = T.constant(np.zeros(x.shape[:-2] + (dim,)))
    h, c = zero, zero
    out = [None] * x.shape[-2]
    for t in order:
        h, c = recurrent_step(T.select(x, t, axis=-2), h, c, cell)
        m = mask[..., t]
        if not m.all():
            keep = T.constant(m[..., None].astype(np.float64))
            h, c = T.mul(h, keep), T.mul(c, keep)
        out[t] = h
    return out


def encode_bidirectional(ids, valid_len, M: Tensor, fwd: LSTMCell, bwd: LSTMCell) -> EncodedText:
    """u_t = h_t(forward) + h_t(backward) for every valid position t."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] < 1:
        raise ValueError("empty token sequence")
    mask = length_mask(valid_len, ids.shape[-1])
    if not mask[..., 0].all():
        raise ValueError("every sentence needs valid_len >= 1")
    x = embed_tokens(ids, M)
    steps = ids.shape[-1]
    hf = _run_direction(x, mask, fwd, range(steps))
    hb = _run_direction(x, mask, bwd, range(steps - 1, -1, -1))
    u = T.add(T.stack(hf, axis=-2), T.stack(hb, axis=-2))
    return EncodedText(u=u, mask=mask)


class TextEncoder:
    """Embedding matrix plus forward/backward LSTM cells under one prefix."""

    def __init__(self, params: ParamStore, prefix: str):
        self.params = params
        self.prefix = prefix

    def __call__(self, ids, valid_len) -> EncodedText:
        p = self.params
        return encode_bidirectional(
            ids,
            valid_len,
            p[f"{self.prefix}/M"],
            LSTMCell.from_store(p, f"{self.prefix}/fwd"),
            LSTMCell.from_store(p, f"{self.prefix}/bwd"),
        )
