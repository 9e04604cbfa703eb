"""Dot-product visual attention, the next-word prediction MLP, and attention-map export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, add, add_bias, bmm, leaky_relu, linear, matmul, reshape,
                       softmax_lastdim, transpose)
from .errors import DimensionError


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def attend(concepts: Tensor, grid: Tensor, U: Tensor) -> tuple[Tensor, Tensor]:
    """
    Attention features and weights for every position.

    concepts: (L, D_e) or (B, L, D_e); grid: (N, D_c) or (B, N, D_c); U: (D_e, D_c).
    Returns ``a`` shaped like concepts but with D_c channels, and weights (.., L, N)
    whose rows are softmax distributions over grid positions.
    """
    c, squeeze = _batched(concepts)
    v, _ = _batched(grid)
    b, length, d_e = c.shape
    if U.shape != (d_e, v.shape[2]) or v.shape[0] != b:
        raise DimensionError(f"attend: concepts {concepts.shape}, grid {grid.shape}, U {U.shape} disagree")
    cu = reshape(matmul(reshape(c, (b * length, d_e)), U), (b, length, v.shape[2]))
    scores = bmm(cu, transpose(v))             # s[b, j, i] = c_j^T U v_i
    weights = softmax_lastdim(scores)
    feats = bmm(weights, v)                     # a_j = sum_i w_ij v_i
    if squeeze:
        return reshape(feats, feats.shape[1:]), reshape(weights, weights.shape[1:])
    return feats, weights


def prediction_logits(a: Tensor, c: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``U^p leaky_relu(W_a^p a + W_c^p c + b^p)`` per position; no output bias."""
    hidden = leaky_relu(add_bias(add(linear(a, params["pred.wa"]), linear(c, params["pred.wc"])),
                                 params["pred.b"]))
    return linear(hidden, params["pred.up"])


def predict(a: Tensor, c: Tensor, params: dict[str, Tensor]) -> Tensor:
    return softmax_lastdim(prediction_logits(a, c, params))


def attention_param_shapes(d_embed: int, d_feat: int, d_hidden: int, vocab_size: int) -> dict[str, tuple]:
    return {
        "att.U": (d_embed, d_feat),
        "pred.wa": (d_hidden, d_feat),
        "pred.wc": (d_hidden, d_embed),
        "pred.b": (d_hidden,),
        "pred.up": (vocab_size, d_hidden),
    }


@dataclass
class AttentionMaps:
    """Per-position weights over the d x d grid; ``levels[l]`` holds the map fed into layer l+1."""

    top: np.ndarray                       # (L, N)
    d: int
    levels: list[np.ndarray] = field(default_factory=list)

    def column_sums(self) -> np.ndarray:
        return np.stack([m.sum(axis=-1) for m in [self.top, *self.levels]])


def level_path(path, level: int) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.level{level}{path.suffix}")


def _write_maps(weights: np.ndarray, d: int, words: Sequence[str], path: Path) -> None:
    if not np.isfinite(weights).all():
        raise ValueError("attention maps contain non-finite values")
    blocks = []
    for j, row in enumerate(weights):
        word = words[j] if j < len(words) else "-"
        grid = row.reshape(d, d)
        lines = [f"position {j} {word}"]
        lines += [" ".join(f"{w:.6f}" for w in r) for r in grid]
        blocks.append("\n".join(lines))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def export_attention(maps: AttentionMaps, words: Sequence[str], path) -> list[Path]:
    """
    Write one text block per position: a ``position <j> <word>`` header and d rows of weights.

    Hierarchical maps go to sibling files named ``<stem>.level<l><suffix>``.
    Returns the paths written.
    """
    path = Path(path)
    _write_maps(maps.top, maps.d, words, path)
    written = [path]
    for level, weights in enumerate(maps.levels):
        target = level_path(path, level)
        _write_maps(weights, maps.d, words, target)
        written.append(target)
    return written


def parse_attention(path) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for block in Path(path).read_text(encoding="utf-8").strip().split("\n\n"):
        header, *rows = block.splitlines()
        word = header.split(" ", 2)[2]
        blocks.append((word, np.array([[float(x) for x in r.split()] for r in rows])))
    return blocks
