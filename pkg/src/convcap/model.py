"""The full captioner: optional vision encoder, language CNN, attention and prediction heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionMaps, attend, attention_param_shapes, prediction_logits
from .autodiff import Tensor, softmax_lastdim
from .config import ModelConfig
from .errors import ConfigurationError, DimensionError
from .language import ConceptSequence, forward_language, language_param_shapes
from .vision import encode, encoder_param_shapes, grid_side

VISION_PREFIX = "enc"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in a fixed order."""
    if cfg.vocab_size < 1:
        raise ConfigurationError("vocab_size must be set before building parameters")
    shapes = {}
    if cfg.uses_encoder:
        shapes.update(encoder_param_shapes(cfg.enc_channels, cfg.d_feat))
    shapes.update(language_param_shapes(cfg))
    shapes.update(attention_param_shapes(cfg.d_embed, cfg.d_feat, cfg.d_hidden, cfg.vocab_size))
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith((".b", ".ba", ".bb"))


def is_vision(name: str) -> bool:
    return name.startswith(VISION_PREFIX)


def module_of(name: str) -> str:
    if is_vision(name):
        return "vision-encoder"
    if name == "embed":
        return "embedding"
    if name.startswith("conv") and ".att_" not in name:
        return "language-cnn"
    if ".att_" in name or (name.startswith("att") and name != "att.U"):
        return "hierarchical-attention"
    if name == "att.U":
        return "attention"
    return "prediction"


@dataclass
class ForwardOutput:
    logits: Tensor                 # (B, L, V)
    probs: Tensor                  # (B, L, V)
    concepts: ConceptSequence
    top_weights: Tensor            # (B, L, N)

    def attention_maps(self, b: int, d: int) -> AttentionMaps:
        return AttentionMaps(self.top_weights.data[b], d,
                             [w.data[b] for w in self.concepts.level_weights])


class Captioner:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config.validate()
        expected = param_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigurationError(f"missing parameters: {sorted(missing)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise DimensionError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: params[name] for name in expected}

    @property
    def dtype(self):
        return self.params["att.U"].dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def grid_d(self) -> int | None:
        return grid_side(self.config.image_size) if self.config.uses_encoder else None

    def features(self, images=None, features=None) -> Tensor:
        """(B, N, D_c) grid features, from rasters via the encoder or from precomputed arrays."""
        if features is not None:
            if isinstance(features, Tensor):
                return features if features.data.ndim == 3 else Tensor(features.data[None], dtype=features.dtype)
            data = np.asarray(features)
            return Tensor(data if data.ndim == 3 else data[None], dtype=self.dtype)
        if images is None:
            raise ConfigurationError("need either images or precomputed features")
        if not self.config.uses_encoder:
            raise ConfigurationError("model has no vision encoder (image_size = 0); supply feature grids")
        return encode(images, self.params)

    def forward(self, tokens, grid: Tensor, keep_levels: bool = False) -> ForwardOutput:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        seq = forward_language(tokens, self.params, self.config, grid, keep_levels)
        feats, weights = attend(seq.concepts, grid, self.params["att.U"])
        logits = prediction_logits(feats, seq.concepts, self.params)
        return ForwardOutput(logits, softmax_lastdim(logits), seq, weights)

    def copy(self) -> "Captioner":
        return Captioner(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad,
                                                         dtype=v.dtype, name=k)
                                       for k, v in self.params.items()})


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Per-module parameter totals from the shape table alone."""
    counts: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        counts[module_of(name)] = counts.get(module_of(name), 0) + int(np.prod(shape))
    return counts
