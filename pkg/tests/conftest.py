import numpy as np
import pytest

from dan.config import ModelConfig
from dan.mdan import MDan
from dan.rdan import RDan


def perturb_biases(model, rng, scale=0.3):
    """Glorot init leaves biases at zero; tests want every term exercised."""
    for name, p in model.params.items():
        if "/b" in name:
            p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


def small_model(kind, seed=0, d=8, K=2, D_v=6, V=12, C=6, biases=True):
    cfg = ModelConfig(kind=kind, steps=K, dim=d, feature_dim=D_v, vocab_size=V, n_answers=C, margin=1.0)
    model = (RDan if kind == "rdan" else MDan)(cfg, seed=seed)
    if biases:
        perturb_biases(model, np.random.default_rng(seed + 1000))
    return model


def random_inputs(rng, B=None, N=4, T=5, D_v=6, V=12, min_len=1):
    lead = () if B is None else (B,)
    regions = rng.standard_normal(lead + (N, D_v))
    lens = rng.integers(min_len, T + 1, size=lead) if B is not None else np.int64(rng.integers(min_len, T + 1))
    ids = rng.integers(1, V, size=lead + (T,))
    ids = np.where(np.arange(T) < np.asarray(lens)[..., None], ids, 0)
    return regions, ids, lens


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
