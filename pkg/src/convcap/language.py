"""Word embedding and the stack of causal gated convolutions that turns a caption into concepts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .attention import attend
from .autodiff import Tensor, add, causal_conv1d, gather_rows, linear, mul, sigmoid
from .config import ModelConfig
from .errors import ConfigurationError


class LayerParams(NamedTuple):
    wa: Tensor
    wb: Tensor
    ba: Tensor
    bb: Tensor
    att_a: Tensor | None = None
    att_b: Tensor | None = None


@dataclass
class ConceptSequence:
    concepts: Tensor                                   # top-level c, (.., L, D_e)
    levels: list[Tensor] = field(default_factory=list)  # h^0 .. h^depth when retained
    level_weights: list[Tensor] = field(default_factory=list)  # attention feeding layers 1..depth


def receptive_field(depth: int, k: int) -> int:
    """Number of trailing input positions visible to one output of a causal stack."""
    if depth < 1 or k < 1:
        raise ConfigurationError(f"receptive_field needs depth >= 1 and k >= 1, got ({depth}, {k})")
    return (k - 1) * depth + 1


def language_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d_e, k = cfg.d_embed, cfg.kernel
    shapes = {"embed": (cfg.vocab_size, d_e)}
    for l in range(1, cfg.depth + 1):
        shapes[f"conv{l}.wa"] = (k, d_e, d_e)
        shapes[f"conv{l}.wb"] = (k, d_e, d_e)
        shapes[f"conv{l}.ba"] = (d_e,)
        shapes[f"conv{l}.bb"] = (d_e,)
        if cfg.hierarchical:
            shapes[f"conv{l}.att_a"] = (d_e, cfg.d_feat)
            shapes[f"conv{l}.att_b"] = (d_e, cfg.d_feat)
            shapes[f"att{l - 1}.U"] = (d_e, cfg.d_feat)
    return shapes


def layer_params(params: dict[str, Tensor], l: int) -> LayerParams:
    p = f"conv{l}."
    return LayerParams(params[p + "wa"], params[p + "wb"], params[p + "ba"], params[p + "bb"],
                       params.get(p + "att_a"), params.get(p + "att_b"))


def embed(tokens, params: dict[str, Tensor]) -> Tensor:
    return gather_rows(params["embed"], np.asarray(tokens, dtype=np.int64))


def glu_layer(h_prev: Tensor, lp: LayerParams, attn_inject: Tensor | None = None) -> Tensor:
    ha = causal_conv1d(h_prev, lp.wa, lp.ba)
    hb = causal_conv1d(h_prev, lp.wb, lp.bb)
    if attn_inject is not None:
        if lp.att_a is None or lp.att_b is None:
            raise ConfigurationError("attention injection given but the layer has no projections")
        ha = add(ha, linear(attn_inject, lp.att_a))
        hb = add(hb, linear(attn_inject, lp.att_b))
    return mul(ha, sigmoid(hb))


def forward_language(tokens, params: dict[str, Tensor], cfg: ModelConfig, grid: Tensor | None = None,
                     keep_levels: bool = False) -> ConceptSequence:
    """
    Run the causal GLU stack over ``tokens`` ((L,) or (B, L) ids).

    With ``cfg.hierarchical`` the attention features of level l-1 (level 0 being
    the embeddings) are injected into layer l.  With ``cfg.skip_every = s``
    every s-th layer's output gets the output of layer l-s added to it.
    """
    if cfg.depth < 1:
        raise ConfigurationError("language stack depth must be >= 1")
    if cfg.hierarchical and grid is None:
        raise ConfigurationError("hierarchical attention needs a feature grid")
    h = embed(tokens, params)
    outputs = [h]
    weights = []
    for l in range(1, cfg.depth + 1):
        inject = None
        if cfg.hierarchical:
            inject, w = attend(h, grid, params[f"att{l - 1}.U"])
            weights.append(w)
        h = glu_layer(h, layer_params(params, l), inject)
        if cfg.skip_every and l % cfg.skip_every == 0:
            h = add(h, outputs[l - cfg.skip_every])
        outputs.append(h)
    return ConceptSequence(h, outputs if keep_levels else [], weights)
