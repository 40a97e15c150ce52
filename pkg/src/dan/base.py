"""Parameter layout and input handling shared by both network variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import Tensor
from .text import EncodedText, TextEncoder, init_encoder


@dataclass
class AttentionTrace:
    """Per-step attention weights, one row per step and modality."""

    visual: list = field(default_factory=list)
    textual: list = field(default_factory=list)

    def to_json(self) -> dict:
        steps = []
        for k in range(max(len(self.visual), len(self.textual))):
            entry = {}
            if k < len(self.visual):
                entry["visual"] = [float(x) for x in self.visual[k]]
            if k < len(self.textual):
                entry["textual"] = [float(x) for x in self.textual[k]]
            steps.append(entry)
        return {"steps": steps}


class DualAttentionBase:
    """Owns a :class:`ParamStore` laid out under ``<kind>/``."""

    kind = ""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        if config.kind != self.kind:
            raise ValueError(f"{type(self).__name__} needs kind {self.kind!r}, got {config.kind!r}")
        self.config = config
        if params is None:
            params = ParamStore()
            self.init_params(params, np.random.default_rng(seed))
        self.params = params
        self.encoder = TextEncoder(params, f"{self.kind}/text")

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        c = self.config
        init_encoder(params, f"{self.kind}/text", c.dim, c.vocab_size, rng)
        A.init_global_visual(params, f"{self.kind}/vatt/0", c.dim, c.feature_dim, rng)
        for k in range(1, c.steps + 1):
            A.init_visual_step(params, f"{self.kind}/vatt/{k}", c.dim, c.feature_dim, rng)
            A.init_textual_step(params, f"{self.kind}/tatt/{k}", c.dim, rng)

    def visual_step(self, k: int) -> A.VisualStep:
        return A.VisualStep.from_store(self.params, f"{self.kind}/vatt/{k}")

    def textual_step(self, k: int) -> A.TextualStep:
        return A.TextualStep.from_store(self.params, f"{self.kind}/tatt/{k}")

    def regions_tensor(self, regions) -> Tensor:
        if isinstance(regions, Tensor):
            return regions
        regions = np.asarray(regions, dtype=np.float64)
        if regions.shape[-1] != self.config.feature_dim:
            raise ValueError(
                f"region features have width {regions.shape[-1]}, model expects {self.config.feature_dim}"
            )
        if regions.shape[-2] < 1:
            raise ValueError("no regions")
        return T.constant(regions)

    def encode_text(self, ids, valid_len) -> EncodedText:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > self.config.max_len:
            raise ValueError(f"sentence longer than max_len={self.config.max_len}")
        return self.encoder(ids, valid_len)

    def global_visual(self, regions: Tensor) -> Tensor:
        p = self.params
        return A.global_visual_context(regions, p[f"{self.kind}/vatt/0/P"], p[f"{self.kind}/vatt/0/b_p"])

    @staticmethod
    def global_textual(text: EncodedText) -> Tensor:
        return A.global_textual_context(text)
