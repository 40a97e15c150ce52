"""SGD training loop, evaluation and model (de)serialisation."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, OptimizerConfig
from .mdan import MDan, sample_negatives
from .metrics import RetrievalMetrics, ground_truth_ranks, mean_vqa_accuracy, retrieval_metrics
from .params import ParamStore
from .rdan import RDan, gold_counts, predict_answer
from .tensor import Tape
from .text import pad_batch

logger = logging.getLogger(__name__)

MODELS = {"rdan": RDan, "mdan": MDan}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class KindMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimiser


def clip_gradients(grads: dict, threshold: float) -> dict:
    """Rescale all gradients together so their global L2 norm is <= threshold."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if norm <= threshold:
        return grads
    factor = threshold / norm
    return {n: g * factor for n, g in grads.items()}


def sgd_step(params: ParamStore, grads: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """v = momentum·v + g + weight_decay·w;  w -= lr·v."""
    for name in params:
        if name not in grads or grads[name] is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
    for name, p in params.items():
        v = momentum * params.momentum(name) + grads[name] + weight_decay * p.data
        params.set_momentum(name, v)
        p.data = p.data - lr * v


# ---------------------------------------------------------------------------
# batching


def collate_vqa(items: Sequence) -> dict:
    ids, lens = pad_batch([it.question for it in items])
    return {
        "regions": np.stack([it.scene.regions for it in items]),
        "ids": ids,
        "lens": lens,
        "answers": np.array([it.answer for it in items], dtype=np.int64),
    }


def collate_match(items: Sequence) -> dict:
    ids, lens = pad_batch([it.caption for it in items])
    return {"regions": np.stack([it.scene.regions for it in items]), "ids": ids, "lens": lens}


def _chunks(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


# ---------------------------------------------------------------------------
# model construction


def build_model(config: ModelConfig, seed: int = 0, params: ParamStore | None = None):
    return MODELS[config.kind](config, params=params, seed=seed)


def model_config_for(dataset, kind: str, **overrides) -> ModelConfig:
    """Fill data-dependent fields of a :class:`ModelConfig` from ``dataset``."""
    fields = {
        "kind": kind,
        "feature_dim": dataset.concepts.feature_dim,
        "vocab_size": len(dataset.vocab),
        "n_answers": dataset.n_answers,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**fields)


def model_from_checkpoint(ckpt: Checkpoint):
    config = ModelConfig.from_dict(ckpt.model)
    model = build_model(config)
    model.params.load_values(ckpt.params)
    return model


def load_model(path, kind: str | None = None):
    ckpt = load_checkpoint(path)
    if kind is not None and ckpt.kind != kind:
        raise KindMismatchError(f"checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    return model_from_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# evaluation


def _require(model, kind: str) -> None:
    if model.config.kind != kind:
        raise KindMismatchError(f"expected a {kind!r} model, got {model.config.kind!r}")


def predict_vqa(model: RDan, items: Sequence, candidates=None, batch_size: int = 256):
    """Predicted answer ids and the full answer distributions."""
    _require(model, "rdan")
    preds, probs = [], []
    for chunk in _chunks(items, batch_size):
        b = collate_vqa(chunk)
        out = model.forward(b["regions"], b["ids"], b["lens"])
        probs.append(out.probs)
        preds.append(predict_answer(out.probs, candidates))
    return np.concatenate(preds), np.concatenate(probs)


def evaluate_vqa(model: RDan, items: Sequence, candidates=None, batch_size: int = 256) -> float:
    """Mean VQA accuracy with single-gold annotator counts."""
    preds, _ = predict_vqa(model, items, candidates, batch_size)
    return mean_vqa_accuracy(preds.tolist(), [gold_counts(it.answer) for it in items])


def embed_items(model: MDan, items: Sequence, modality: str, batch_size: int = 256) -> np.ndarray:
    """Joint-space embeddings, one row per item, each item embedded once."""
    _require(model, "mdan")
    rows = []
    for chunk in _chunks(items, batch_size):
        b = collate_match(chunk)
        if modality == "image":
            rows.append(model.embed_image(b["regions"]).z.data)
        elif modality == "text":
            rows.append(model.embed_text(b["ids"], b["lens"]).z.data)
        else:
            raise ValueError(f"unknown modality {modality!r}")
    return np.concatenate(rows)


def evaluate_retrieval(
    model: MDan, items: Sequence, direction: str = "image2text", ks=(1, 5, 10), batch_size: int = 256
) -> RetrievalMetrics:
    """Rank the gallery for each query by inner product; the gold item shares the query's id."""
    _require(model, "mdan")
    if not items:
        raise ValueError("empty gallery")
    z_img = embed_items(model, items, "image", batch_size)
    z_txt = embed_items(model, items, "text", batch_size)
    if direction == "image2text":
        scores = z_img @ z_txt.T
    elif direction == "text2image":
        scores = z_txt @ z_img.T
    else:
        raise ValueError(f"unknown direction {direction!r}")
    ranks = ground_truth_ranks(scores, np.arange(len(items)), [it.item_id for it in items])
    return retrieval_metrics(ranks, ks)


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Owns a model, its optimiser state and the trainer RNG stream.

    Every stochastic choice (shuffling, dropout masks, negative sampling)
    draws from ``self.rng`` so a checkpoint restores training exactly.
    """

    def __init__(self, model, optimizer: OptimizerConfig, rng: Optional[np.random.Generator] = None):
        self.model = model
        self.opt = optimizer
        self.rng = rng if rng is not None else np.random.default_rng([optimizer.seed, 7])
        self.epoch = 0
        self.best_metric: Optional[float] = None

    @property
    def kind(self) -> str:
        return self.model.config.kind

    def learning_rate(self, epoch: int) -> float:
        lr = self.opt.learning_rate
        return lr / self.opt.lr_drop_factor if epoch >= self.opt.lr_drop_epoch else lr

    def batch_loss(self, batch: dict, train: bool):
        dropout = self.opt.dropout_rate if train else 0.0
        rng = self.rng if train else None
        m = self.model
        if self.kind == "rdan":
            return m.loss(batch["regions"], batch["ids"], batch["lens"], batch["answers"], dropout, rng)
        n = len(batch["lens"])
        if train:
            neg_img, neg_txt = sample_negatives(n, self.rng)
        else:
            neg_img = neg_txt = (np.arange(n) + 1) % n
        return m.ranking_loss_in_batch(
            batch["regions"], batch["ids"], batch["lens"], neg_img, neg_txt, dropout=dropout, rng=rng
        )

    def _collate(self, items):
        return collate_vqa(items) if self.kind == "rdan" else collate_match(items)

    def _batches(self, items: Sequence, order: np.ndarray):
        size = self.opt.batch_size
        for i in range(0, len(order), size):
            idx = order[i : i + size]
            if self.kind == "mdan" and len(idx) < 2:
                continue
            yield self._collate([items[j] for j in idx])

    def train_epoch(self, items: Sequence) -> float:
        lr = self.learning_rate(self.epoch)
        order = self.rng.permutation(len(items))
        total, count = 0.0, 0
        params = self.model.params
        for b, batch in enumerate(self._batches(items, order)):
            params.zero_grad()
            with Tape() as tape:
                loss = self.batch_loss(batch, train=True)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {self.epoch + 1}, batch {b}")
            tape.backward(loss)
            grads = clip_gradients(params.grads(), self.opt.clip_threshold)
            sgd_step(params, grads, lr, self.opt.momentum, self.opt.weight_decay)
            total += value
            count += 1
        self.epoch += 1
        return total / max(count, 1)

    def mean_loss(self, items: Sequence, batch_size: int = 256) -> float:
        """Average batch loss without dropout or parameter updates."""
        losses = []
        for chunk in _chunks(items, batch_size):
            if self.kind == "mdan" and len(chunk) < 2:
                continue
            losses.append(self.batch_loss(self._collate(chunk), train=False).item())
        return float(np.mean(losses)) if losses else float("nan")

    def metric(self, items: Sequence) -> float:
        if self.kind == "rdan":
            return evaluate_vqa(self.model, items)
        return evaluate_retrieval(self.model, items, "image2text").recall_at[1]

    def checkpoint(self) -> Checkpoint:
        params = self.model.params
        return Checkpoint(
            model=self.model.config.to_dict(),
            params=params.copy_values(),
            momentum={n: params.momentum(n).copy() for n in params},
            optimizer=self.opt.to_dict(),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            extra={"best_metric": self.best_metric},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, optimizer: OptimizerConfig | None = None) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        for name, v in ckpt.momentum.items():
            model.params.set_momentum(name, v)
        opt = optimizer or OptimizerConfig.from_dict(ckpt.optimizer)
        rng = np.random.default_rng()
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        trainer = cls(model, opt, rng)
        trainer.epoch = ckpt.epoch
        trainer.best_metric = ckpt.extra.get("best_metric")
        return trainer

    def fit(
        self,
        train_items: Sequence,
        val_items: Sequence = (),
        sink: str | Path | None = None,
        log_path: str | Path | None = None,
        on_epoch: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Train until ``opt.epochs``; returns the per-epoch log records.

        With ``sink`` set, ``last.ckpt`` is written after every epoch and
        ``best.ckpt`` whenever the validation metric improves.
        """
        if not train_items:
            raise ValueError("empty training set")
        sink = Path(sink) if sink is not None else None
        if sink is not None:
            sink.mkdir(parents=True, exist_ok=True)
        log: list[dict] = []
        log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
        try:
            while self.epoch < self.opt.epochs:
                train_loss = self.train_epoch(train_items)
                records = [{"epoch": self.epoch, "split": "train", "loss": train_loss, "metric": None}]
                improved = False
                if val_items:
                    val_loss = self.mean_loss(val_items)
                    if not math.isfinite(val_loss):
                        raise DivergenceError(f"non-finite validation loss {val_loss} after epoch {self.epoch}")
                    metric = self.metric(val_items)
                    records.append({"epoch": self.epoch, "split": "val", "loss": val_loss, "metric": metric})
                    if self.best_metric is None or metric > self.best_metric:
                        self.best_metric = metric
                        improved = True
                logger.info("epoch %d: %s", self.epoch, records)
                if sink is not None:
                    ckpt = self.checkpoint()
                    save_checkpoint(ckpt, sink / "last.ckpt")
                    if improved or not val_items:
                        save_checkpoint(ckpt, sink / "best.ckpt")
                for r in records:
                    log.append(r)
                    if log_file is not None:
                        log_file.write(json.dumps(r, sort_keys=True) + "\n")
                    if on_epoch is not None:
                        on_epoch(r)
        finally:
            if log_file is not None:
                log_file.close()
        return log


def train(kind: str, dataset, model_config: ModelConfig | None, optimizer: OptimizerConfig, sink=None, log_path=None):
    """Build a fresh model for ``dataset`` and train it; returns (trainer, log)."""
    if model_config is None:
        model_config = model_config_for(dataset, kind)
    if model_config.kind != kind:
        raise KindMismatchError(f"config is for {model_config.kind!r}, asked to train {kind!r}")
    expected = {"rdan": "vqa", "mdan": "match"}[kind]
    if dataset.task != expected:
        raise KindMismatchError(f"{kind} trains on {expected!r} data, dataset is {dataset.task!r}")
    model = build_model(model_config, seed=optimizer.seed)
    trainer = Trainer(model, optimizer)
    if sink is not None and optimizer.epochs == 0:
        Path(sink).mkdir(parents=True, exist_ok=True)
        save_checkpoint(trainer.checkpoint(), Path(sink) / "last.ckpt")
        save_checkpoint(trainer.checkpoint(), Path(sink) / "best.ckpt")
    log = trainer.fit(dataset.splits["train"], dataset.splits.get("val", ()), sink=sink, log_path=log_path)
    return trainer, log
