"""Independent slow reference implementations used as test oracles.

Nothing here imports the package's numerical code: loops and plain Python
arithmetic only, so agreement with the vectorized versions is meaningful.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


def loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def loop_softmax(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def loop_attention(x_q, x_kv, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, allowed=None):
    """Multi-head attention by explicit loops.

    ``allowed[i][j]`` (optional) says whether query i may see key j.
    Returns (output rows, per-head weights[h][i][j]).
    """
    d = len(wq[0])
    dk = d // n_heads

    def proj(rows, w, b):
        return [[sum(r[t] * w[t][j] for t in range(len(r))) + b[j] for j in range(len(b))]
                for r in rows]

    q, k, v = proj(x_q, wq, bq), proj(x_kv, wk, bk), proj(x_kv, wv, bv)
    ctx = [[0.0] * d for _ in x_q]
    weights = []
    for h in range(n_heads):
        lo, hi = h * dk, (h + 1) * dk
        wh = []
        for i in range(len(x_q)):
            scores = []
            for j in range(len(x_kv)):
                if allowed is not None and not allowed[i][j]:
                    scores.append(-math.inf)
                    continue
                scores.append(sum(q[i][t] * k[j][t] for t in range(lo, hi)) / math.sqrt(dk))
            p = loop_softmax(scores)
            wh.append(p)
            for t in range(lo, hi):
                ctx[i][t] = sum(p[j] * v[j][t] for j in range(len(x_kv)))
        weights.append(wh)
    return proj(ctx, wo, bo), weights


def loop_layer_norm(row, gain, bias, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]


def finite_difference_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def loop_info_nce(img, txt, img_cands, txt_cands, tau):
    """Symmetric InfoNCE where row i's positive is candidate i."""
    total = 0.0
    B = len(img)
    for i in range(B):
        s = [sum(a * b for a, b in zip(img[i], c)) / tau for c in txt_cands]
        total += -(s[i] - math.log(sum(math.exp(v) for v in s)))
        s = [sum(a * b for a, b in zip(txt[i], c)) / tau for c in img_cands]
        total += -(s[i] - math.log(sum(math.exp(v) for v in s)))
    return total / (2 * B)


def brute_force_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_auc_by_orderings(scores, labels) -> float:
    """AUC as the fraction of correctly ordered (positive, negative) pairs,
    averaged over every ranking consistent with the scores (ties permuted)."""
    n = len(scores)
    total, count = 0.0, 0
    for perm in itertools.permutations(range(n)):
        if any(scores[perm[i]] < scores[perm[i + 1]] for i in range(n - 1)):
            continue  # not a descending ranking
        rank = {idx: r for r, idx in enumerate(perm)}
        pairs = [(p, q) for p in range(n) for q in range(n) if labels[p] and not labels[q]]
        total += sum(rank[p] < rank[q] for p, q in pairs) / len(pairs)
        count += 1
    return total / count


def brute_force_ap(scores, labels) -> float:
    """Average precision: precision at the rank of each positive (scores distinct)."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, precisions = 0, []
    for r, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / r)
    return sum(precisions) / len(precisions)


def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def brute_force_cider(cands, refs, variant="d", sigma=6.0, max_n=4):
    """CIDEr by enumerating the full n-gram vocabulary of the corpus.

    ``cands[i]`` is a token list, ``refs[i]`` a list of token lists.
    """
    N = len(cands)
    out = [0.0] * N
    for n in range(1, max_n + 1):
        vocab = sorted({g for rs in refs for r in rs for g in ngrams(r, n)} |
                       {g for c in cands for g in ngrams(c, n)})
        df = {g: sum(1 for rs in refs if any(g in ngrams(r, n) for r in rs)) for g in vocab}

        def vec(tokens):
            counts = Counter(ngrams(tokens, n))
            return [counts[g] * math.log(N / max(1, df[g])) for g in vocab]

        for i in range(N):
            c = vec(cands[i])
            acc = 0.0
            for r_tokens in refs[i]:
                r = vec(r_tokens)
                nc = math.sqrt(sum(v * v for v in c))
                nr = math.sqrt(sum(v * v for v in r))
                if nc == 0 or nr == 0:
                    continue
                if variant == "d":
                    dot = sum(min(a, b) * b for a, b in zip(c, r))
                    pen = math.exp(-((len(cands[i]) - len(r_tokens)) ** 2) / (2 * sigma ** 2))
                else:
                    dot = sum(a * b for a, b in zip(c, r))
                    pen = 1.0
                acc += pen * dot / (nc * nr)
            out[i] += acc / len(refs[i])
    return [10.0 * v / max_n for v in out]


def brute_lcs(a, b) -> int:
    """Longest common subsequence by recursion with memo (independent of the DP table)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)
