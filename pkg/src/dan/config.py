"""Model and optimiser configuration plus the named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

PAPER_MARGIN = 100.0
PAPER_DIM = 512


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "rdan"  # "rdan" or "mdan"
    steps: int = 2  # K, attention steps after the global step 0
    dim: int = 32  # d: embedding, LSTM and attention width
    feature_dim: int = 32  # D_v: region feature width
    vocab_size: int = 64
    n_answers: int = 6  # C, r-DAN only
    max_len: int = 32
    margin: float = PAPER_MARGIN  # m-DAN ranking margin

    def __post_init__(self):
        if self.kind not in ("rdan", "mdan"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "rdan" and self.steps < 1:
            raise ValueError("r-DAN needs at least one attention step")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("dim", "feature_dim", "vocab_size", "n_answers", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_threshold: float = 0.1
    dropout_rate: float = 0.5
    epochs: int = 60
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 10.0
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "weight_decay", "clip_threshold", "dropout_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_drop_epoch > self.epochs:
            raise ValueError("lr_drop_epoch exceeds epochs")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def scaled_margin(dim: int) -> float:
    """Reference margin (100 at width 512) rescaled linearly to width ``dim``."""
    return PAPER_MARGIN * dim / PAPER_DIM


PAPER_OPTIMIZER = OptimizerConfig()

# Inner products of d=32 embeddings stay small early in training; a margin
# near their scale keeps the hinge informative (see scaled_margin for the
# width-rescaled alternative).
TOY_MARGIN = 2.0

TOY_OPTIMIZER = OptimizerConfig(
    learning_rate=0.05,
    epochs=30,
    lr_drop_epoch=20,
    batch_size=16,
    clip_threshold=1.0,
    dropout_rate=0.0,
)

PRESETS = {
    "paper": {
        "model": {"steps": 2, "dim": PAPER_DIM, "margin": PAPER_MARGIN, "n_answers": 2000},
        "optimizer": PAPER_OPTIMIZER.to_dict(),
    },
    "toy": {
        "model": {"steps": 2, "dim": 32, "feature_dim": 32, "margin": TOY_MARGIN},
        "optimizer": TOY_OPTIMIZER.to_dict(),
    },
}


# Synthetic-data generation knobs per task; "scale" is the prototype norm.
DATA_PRESETS = {
    "vqa": {
        "concepts": 26, "attributes": 6, "feature_dim": 32, "regions": 8, "scale": 3.0,
        "noise_ratio": 0.05, "train": 5000, "val": 500, "test": 500,
    },
    "match": {
        "concepts": 26, "attributes": 6, "feature_dim": 32, "regions": 8, "scale": 3.0,
        "noise_ratio": 0.05, "train": 2000, "val": 200, "test": 200, "caption_min": 3, "caption_max": 3,
    },
}


def data_preset(task: str) -> dict:
    if task not in DATA_PRESETS:
        raise KeyError(f"unknown task {task!r}; choose from {sorted(DATA_PRESETS)}")
    return dict(DATA_PRESETS[task])


def preset(name: str) -> tuple[dict, dict]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return dict(p["model"]), dict(p["optimizer"])


__all__ = [
    "ModelConfig",
    "OptimizerConfig",
    "PAPER_OPTIMIZER",
    "TOY_MARGIN",
    "TOY_OPTIMIZER",
    "PRESETS",
    "DATA_PRESETS",
    "data_preset",
    "preset",
    "replace",
    "scaled_margin",
]
