"""Small builders shared by the test modules."""

import numpy as np

from convcap.config import ModelConfig
from convcap.model import Captioner, is_bias, param_shapes
from convcap.trainer import init_params


def toy_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=11, d_embed=8, d_feat=6, d_hidden=10, depth=2, kernel=2, image_size=0)
    base.update(overrides)
    return ModelConfig(**base)


def random_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.5, dtype=np.float64) -> Captioner:
    """Weights and biases drawn at a scale where every component visibly matters."""
    rng = np.random.default_rng(seed + 1000)
    params = init_params(param_shapes(cfg), seed, scale, dtype)
    for name, p in params.items():
        if is_bias(name):
            p.data[...] = rng.normal(0, scale, p.shape)
    return Captioner(cfg, params)


def random_grid(cfg: ModelConfig, n: int = 4, seed: int = 0, batch: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    shape = (n, cfg.d_feat) if batch is None else (batch, n, cfg.d_feat)
    return rng.standard_normal(shape)


def random_tokens(cfg: ModelConfig, length: int, seed: int = 0) -> np.ndarray:
    """START followed by ``length - 1`` content ids (never PAD/START)."""
    rng = np.random.default_rng(seed)
    return np.concatenate([[1], rng.integers(2, cfg.vocab_size, size=length - 1)])
