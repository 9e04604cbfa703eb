"""
Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars (or at most
per-row numpy dot products) and never touches the package's autodiff layer, so
agreement with the vectorized code is evidence rather than tautology.
"""

import math
from collections import defaultdict

import numpy as np


def conv1d_loop(x, kernel, bias):
    """output[j, o] = bias[o] + sum_t sum_c kernel[t, c, o] * x_padded[j + t, c]."""
    length, c_in = x.shape
    k, _, c_out = kernel.shape
    out = np.zeros((length, c_out))
    for j in range(length):
        for o in range(c_out):
            acc = bias[o]
            for t in range(k):
                src = j + t - (k - 1)        # left padding of k-1 rows
                if src < 0:
                    continue
                for c in range(c_in):
                    acc += kernel[t, c, o] * x[src, c]
            out[j, o] = acc
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def glu_loop(h, wa, ba, wb, bb, inject=None, att_a=None, att_b=None):
    ha = conv1d_loop(h, wa, ba)
    hb = conv1d_loop(h, wb, bb)
    if inject is not None:
        ha = ha + np.array([[sum(att_a[o, c] * row[c] for c in range(len(row))) for o in range(att_a.shape[0])]
                            for row in inject])
        hb = hb + np.array([[sum(att_b[o, c] * row[c] for c in range(len(row))) for o in range(att_b.shape[0])]
                            for row in inject])
    out = np.zeros_like(ha)
    for j in range(ha.shape[0]):
        for o in range(ha.shape[1]):
            out[j, o] = ha[j, o] * sigmoid(hb[j, o])
    return out


def softmax_list(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


def attend_loop(c, grid, U):
    """Returns (a, w) for concepts (L, D_e) and grid (N, D_c)."""
    a = np.zeros((c.shape[0], grid.shape[1]))
    w = np.zeros((c.shape[0], grid.shape[0]))
    for j in range(c.shape[0]):
        scores = []
        for i in range(grid.shape[0]):
            s = 0.0
            for e in range(U.shape[0]):
                for f in range(U.shape[1]):
                    s += c[j, e] * U[e, f] * grid[i, f]
            scores.append(s)
        w[j] = softmax_list(scores)
        for i in range(grid.shape[0]):
            a[j] += w[j, i] * grid[i]
    return a, w


def leaky(z):
    return z if z > 0 else 0.1 * z


def language_loop(tokens, p, depth, skip_every=0, hierarchical=False, grid=None):
    """Concepts for one sentence by the loop oracles; ``p`` maps names to float64 arrays."""
    h = np.array([p["embed"][t] for t in tokens], dtype=np.float64)
    outputs = [h]
    for l in range(1, depth + 1):
        if hierarchical:
            inject, _ = attend_loop(h, grid, p[f"att{l - 1}.U"])
            h = glu_loop(h, p[f"conv{l}.wa"], p[f"conv{l}.ba"], p[f"conv{l}.wb"], p[f"conv{l}.bb"],
                         inject, p[f"conv{l}.att_a"], p[f"conv{l}.att_b"])
        else:
            h = glu_loop(h, p[f"conv{l}.wa"], p[f"conv{l}.ba"], p[f"conv{l}.wb"], p[f"conv{l}.bb"])
        if skip_every and l % skip_every == 0:
            h = h + outputs[l - skip_every]
        outputs.append(h)
    return h


def sentence_probs(tokens, grid, p, depth, skip_every=0, hierarchical=False):
    c = language_loop(tokens, p, depth, skip_every, hierarchical, grid)
    a, _ = attend_loop(c, grid, p["att.U"])
    probs = []
    for j in range(c.shape[0]):
        hidden = [leaky(float(p["pred.wa"][o] @ a[j] + p["pred.wc"][o] @ c[j] + p["pred.b"][o]))
                  for o in range(p["pred.b"].shape[0])]
        logits = [sum(p["pred.up"][v, o] * hidden[o] for o in range(len(hidden)))
                  for v in range(p["pred.up"].shape[0])]
        probs.append(softmax_list(logits))
    return probs


def objective(sentences, grids, p, depth, l2, regularized, skip_every=0, hierarchical=False):
    """
    Eq-by-eq loss for a batch: mean over sentences of the summed NLL of each
    next token (the token list includes START and END), plus l2/2 * sum of
    squared entries of the regularized tensors.
    """
    total = 0.0
    for tokens, grid in zip(sentences, grids):
        probs = sentence_probs(tokens[:-1], grid, p, depth, skip_every, hierarchical)
        for j, target in enumerate(tokens[1:]):
            total -= math.log(max(probs[j][target], 1e-12))
    total /= len(sentences)
    reg = sum(float(x) ** 2 for name in regularized for x in np.asarray(p[name]).ravel())
    return total + l2 / 2 * reg


def bleu_counts(candidates, references, max_n=4):
    """Corpus BLEU by dictionary counting; returns (scores, bp)."""
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        best = None
        for r in refs:
            if best is None or abs(len(r) - len(cand)) < abs(best - len(cand)) or \
                    (abs(len(r) - len(cand)) == abs(best - len(cand)) and len(r) < best):
                best = len(r)
        r_len += best
        for n in range(1, max_n + 1):
            cand_counts = defaultdict(int)
            for i in range(len(cand) - n + 1):
                cand_counts[tuple(cand[i:i + n])] += 1
            ref_max = defaultdict(int)
            for r in refs:
                counts = defaultdict(int)
                for i in range(len(r) - n + 1):
                    counts[tuple(r[i:i + n])] += 1
                for g, v in counts.items():
                    ref_max[g] = max(ref_max[g], v)
            for g, v in cand_counts.items():
                matched[n - 1] += min(v, ref_max[g])
                total[n - 1] += v
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    scores = []
    for n in range(1, max_n + 1):
        ps = [matched[i] / total[i] if total[i] else 0.0 for i in range(n)]
        scores.append(0.0 if min(ps) == 0 else bp * math.exp(sum(math.log(x) for x in ps) / n))
    return scores, bp


def truncated_normal_std(bound=2.0, samples=2_000_000, seed=123):
    """Monte-Carlo stddev of a unit normal truncated to [-bound, bound]."""
    x = np.random.default_rng(seed).standard_normal(samples)
    return float(x[np.abs(x) <= bound].std())
