"""Greedy caption generation and corpus-level BLEU."""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .attention import AttentionMaps, attend, prediction_logits
from .autodiff import Tensor, add, no_grad, private_tape
from .corpus import END, PAD, START, UNK, CaptionExample, Vocabulary, detokenize, split_words
from .errors import InputError
from .language import embed, glu_layer, layer_params
from .model import Captioner


@dataclass
class DecodeConfig:
    max_len: int = 70
    start_id: int = START
    end_id: int = END
    suppress_unk: bool = True

    def __post_init__(self):
        if self.max_len < 1:
            raise InputError("max_len must be >= 1")


@dataclass
class DecodeResult:
    tokens: list[int]                                   # content tokens, no START/END
    logits: list[np.ndarray] = field(default_factory=list)
    maps: list[AttentionMaps] = field(default_factory=list)   # one per emitted token (END included)


def _grid_tensor(grid, dtype) -> Tensor:
    data = grid.vectors if hasattr(grid, "vectors") else (grid.data if isinstance(grid, Tensor) else grid)
    data = np.asarray(data)
    return Tensor(data if data.ndim == 3 else data[None], dtype=dtype)


def _choose(logits: np.ndarray, cfg: DecodeConfig) -> int:
    masked = np.array(logits, dtype=np.float64)
    masked[[PAD, cfg.start_id]] = -np.inf
    if cfg.suppress_unk:
        masked[UNK] = -np.inf
    return int(np.argmax(masked))          # first index wins ties


class IncrementalDecoder:
    """
    Feed one token at a time, reusing the activations of earlier positions.

    Each layer keeps the rows of its input seen so far; a new position needs
    only the last ``k`` of them, so one step costs O(depth * k) rows instead
    of recomputing the whole prefix.
    """

    def __init__(self, model: Captioner, grid):
        self.model = model
        self.cfg = model.config
        self.grid = _grid_tensor(grid, model.dtype)
        self.inputs: list[list[np.ndarray]] = [[] for _ in range(self.cfg.depth + 1)]
        self.injects: list[list[np.ndarray]] = [[] for _ in range(self.cfg.depth + 1)]

    def _window(self, rows: list[np.ndarray], width: int) -> np.ndarray:
        recent = rows[-width:]
        missing = width - len(recent)
        pad = [np.zeros_like(rows[0])] * missing
        return np.stack(pad + recent)

    def step(self, token: int) -> tuple[np.ndarray, AttentionMaps]:
        cfg, params, k = self.cfg, self.model.params, self.cfg.kernel
        dt = self.grid.dtype
        with no_grad():
            h = embed(np.array([[token]]), params)              # (1, 1, D_e)
            self.inputs[0].append(h.data[0, 0])
            level_maps = []
            for l in range(1, cfg.depth + 1):
                window = Tensor(self._window(self.inputs[l - 1], k)[None], dtype=dt)
                inject = None
                if cfg.hierarchical:
                    a, w = attend(Tensor(self.inputs[l - 1][-1][None, None], dtype=dt), self.grid,
                                  params[f"att{l - 1}.U"])
                    level_maps.append(w.data[0, 0])
                    self.injects[l - 1].append(a.data[0, 0])
                    inject = Tensor(self._window(self.injects[l - 1], k)[None], dtype=dt)
                out = glu_layer(window, layer_params(params, l), inject)
                row = out.data[:, -1:]
                if cfg.skip_every and l % cfg.skip_every == 0:
                    row = add(Tensor(row, dtype=dt),
                              Tensor(self.inputs[l - cfg.skip_every][-1][None, None], dtype=dt)).data
                self.inputs[l].append(row[0, 0])
            c = Tensor(self.inputs[cfg.depth][-1][None, None], dtype=dt)
            a, w = attend(c, self.grid, params["att.U"])
            logits = prediction_logits(a, c, params).data[0, 0]
        d = int(round(math.sqrt(self.grid.shape[1])))
        return logits, AttentionMaps(w.data[0], d, [m[None] for m in level_maps])


def greedy_decode(grid, model: Captioner, config: DecodeConfig | None = None,
                  incremental: bool = False, keep: bool = False) -> DecodeResult | list[int]:
    """
    Most-probable-word decoding from ``[START]`` until END or ``max_len`` words.

    By default every step recomputes the full prefix; ``incremental=True`` uses
    cached activations and must give the same tokens.  Returns the content
    token list, or a :class:`DecodeResult` with per-step logits and attention
    maps when ``keep`` is set.
    """
    config = config or DecodeConfig(max_len=model.config.max_len)
    grid_t = _grid_tensor(grid, model.dtype)
    d = int(round(math.sqrt(grid_t.shape[1])))
    result = DecodeResult([])
    prefix = [config.start_id]
    stepper = IncrementalDecoder(model, grid_t) if incremental else None
    with private_tape(), no_grad():
        while True:
            if stepper is not None:
                logits, maps = stepper.step(prefix[-1])
            else:
                out = model.forward(np.array([prefix]), grid_t)
                logits = out.logits.data[0, -1]
                maps = AttentionMaps(out.top_weights.data[0, -1:], d,
                                     [w.data[0, -1:] for w in out.concepts.level_weights])
            token = _choose(logits, config)
            if keep:
                result.logits.append(logits)
                result.maps.append(maps)
            if token == config.end_id:
                break
            result.tokens.append(token)
            prefix.append(token)
            if len(result.tokens) >= config.max_len:
                break
    return result if keep else result.tokens


# BLEU

@dataclass
class BleuReport:
    bleu: list[float]              # BLEU-1 .. BLEU-max_n
    brevity_penalty: float
    precisions: list[float]
    clipped: list[int]
    totals: list[int]
    candidate_length: int
    reference_length: int

    def __getitem__(self, n: int) -> float:
        return self.bleu[n - 1]

    def summary(self) -> str:
        scores = " ".join(f"BLEU-{i + 1}={b:.4f}" for i, b in enumerate(self.bleu))
        return (f"{scores} BP={self.brevity_penalty:.4f} "
                f"len(c)={self.candidate_length} len(r)={self.reference_length}")


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, ref_lengths: Sequence[int]) -> int:
    return min(ref_lengths, key=lambda r: (abs(r - c), r))


def bleu(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Sequence[Hashable]]],
         max_n: int = 4) -> BleuReport:
    """
    Corpus BLEU: clipped n-gram matches summed over the corpus, geometric mean of
    the precisions, brevity penalty from per-candidate closest reference lengths.
    No smoothing, so any zero precision at order <= n gives BLEU-n = 0.
    """
    if not candidates:
        raise InputError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise InputError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if max_n < 1:
        raise InputError("max_n must be >= 1")
    clipped, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise InputError("every candidate needs at least one reference")
        c_len += len(cand)
        r_len += _closest_ref_length(len(cand), [len(r) for r in refs])
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            best: Counter = Counter()
            for ref in refs:
                best |= ngrams(ref, n)
            clipped[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    precisions = [c / t if t else 0.0 for c, t in zip(clipped, totals)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) <= 0:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return BleuReport(scores, bp, precisions, clipped, totals, c_len, r_len)


def evaluate(examples: Sequence[CaptionExample], model: Captioner, vocab: Vocabulary,
             config: DecodeConfig | None = None, dump_path=None, workers: int = 1,
             batch_size: int = 32) -> tuple[BleuReport, list[str]]:
    """Decode every example, score the corpus, optionally write the tab-separated dump."""
    if not examples:
        raise InputError("cannot evaluate an empty split")
    config = config or DecodeConfig(max_len=model.config.max_len)
    with no_grad():
        grids = []
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            if chunk[0].image is not None:
                feats = model.features(images=np.stack([ex.image for ex in chunk]))
            else:
                feats = model.features(features=np.stack([ex.features for ex in chunk]))
            grids.extend(feats.data[i] for i in range(feats.shape[0]))

    def run(i: int) -> str:
        return detokenize(greedy_decode(grids[i], model, config, incremental=True), vocab)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hypotheses = list(pool.map(run, range(len(examples))))
    else:
        hypotheses = [run(i) for i in range(len(examples))]
    refs = [[split_words(r) for r in ex.all_references()] for ex in examples]
    report = bleu([split_words(h) for h in hypotheses], refs)
    if dump_path:
        lines = [f"{ex.id}\t{hyp}\t{' ||| '.join(ex.all_references())}" for ex, hyp in zip(examples, hypotheses)]
        Path(dump_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report, hypotheses
