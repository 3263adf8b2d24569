"""BLEU, ROUGE-L, METEOR-lite and CIDEr over word-level tokens.

Texts may be given as strings (lowercased and split on whitespace) or as
token lists.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus.tokenizer import normalize

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


def as_tokens(text) -> list:
    if isinstance(text, str):
        return normalize(text).split()
    return [str(t) for t in text]


class NGramCounter(Counter):
    """Counts of the n-grams of one order in a token sequence."""

    def __init__(self, tokens, n: int):
        if n < 1:
            raise ValueError(f"n-gram order must be >= 1, got {n}")
        toks = as_tokens(tokens)
        super().__init__(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
        self.n = n

    @property
    def total(self) -> int:
        return sum(self.values())


class BleuScores(tuple):
    """(BLEU-1, ..., BLEU-max_n); ``empty_candidate`` flags a zero-length candidate."""

    def __new__(cls, values, empty_candidate: bool = False):
        obj = super().__new__(cls, values)
        obj.empty_candidate = empty_candidate
        return obj


def _closest_ref_len(c: int, ref_lens) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _clipped(cand: list, refs: list, n: int):
    counts = NGramCounter(cand, n)
    max_ref = Counter()
    for r in refs:
        for g, k in NGramCounter(r, n).items():
            max_ref[g] = max(max_ref[g], k)
    return sum(min(k, max_ref[g]) for g, k in counts.items()), counts.total


def _bleu_from_counts(matches, totals, c: int, r: int, max_n: int) -> list:
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    out, log_sum = [], 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            out += [0.0] * (max_n - n)
            break
        log_sum += math.log(matches[n] / totals[n])
        out.append(bp * math.exp(log_sum / (n + 1)))
    return out


def bleu(candidate, references, max_n: int = 4) -> BleuScores:
    """Sentence BLEU-1..max_n, brevity penalty against the closest reference length.

    A zero clipped precision at order n zeroes BLEU-k for every k >= n.
    """
    cand = as_tokens(candidate)
    refs = [as_tokens(r) for r in ([references] if isinstance(references, str) else references)]
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("bleu needs at least one non-empty reference")
    if not cand:
        return BleuScores([0.0] * max_n, empty_candidate=True)
    stats = [_clipped(cand, refs, n) for n in range(1, max_n + 1)]
    r = _closest_ref_len(len(cand), [len(x) for x in refs])
    return BleuScores(_bleu_from_counts([s[0] for s in stats], [s[1] for s in stats],
                                        len(cand), r, max_n))


def corpus_bleu(candidates, references, max_n: int = 4) -> BleuScores:
    """Corpus BLEU: clipped counts and lengths pooled over all samples before the ratio."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("corpus_bleu needs equally many (>0) candidates and reference sets")
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        cand = as_tokens(cand)
        refs = [as_tokens(r) for r in ([refs] if isinstance(refs, str) else refs)]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(x) for x in refs])
        for n in range(max_n):
            m, t = _clipped(cand, refs, n + 1)
            matches[n] += m
            totals[n] += t
    if c_len == 0:
        return BleuScores([0.0] * max_n, empty_candidate=True)
    return BleuScores(_bleu_from_counts(matches, totals, c_len, r_len, max_n))


def lcs_length(a: list, b: list) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure; several references give the best score."""
    if isinstance(reference, (list, tuple)) and reference and not isinstance(reference[0], str):
        return max(rouge_l(candidate, r, beta) for r in reference)
    cand, ref = as_tokens(candidate), as_tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def _align(cand: list, ref: list) -> list:
    """Exact unigram alignment as (cand_pos, ref_pos) pairs.

    Each candidate token takes the reference position right after the
    previous match when that continues a chunk, otherwise the first unused
    occurrence.
    """
    free = {}
    for j, w in enumerate(ref):
        free.setdefault(w, []).append(j)
    pairs, last = [], None
    for i, w in enumerate(cand):
        slots = free.get(w)
        if not slots:
            continue
        j = last + 1 if last is not None and last + 1 in slots else slots[0]
        slots.remove(j)
        pairs.append((i, j))
        last = j
    return pairs


def meteor_lite(candidate, reference) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty 0.5 (chunks/matches)^3."""
    if isinstance(reference, (list, tuple)) and reference and not isinstance(reference[0], str):
        return max(meteor_lite(candidate, r) for r in reference)
    cand, ref = as_tokens(candidate), as_tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:])
                     if not (i1 == i0 + 1 and j1 == j0 + 1))
    p, r = m / len(cand), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    return f_mean * (1 - 0.5 * (chunks / m) ** 3)


@dataclass
class CiderResult:
    scores: np.ndarray
    mean: float


def _tfidf(tokens: list, n: int, df: Counter, log_n: float) -> tuple[dict, float]:
    vec = {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in NGramCounter(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider(candidates, references, variant: str = "d", max_n: int = 4,
          sigma: float = CIDER_SIGMA) -> CiderResult:
    """CIDEr over a corpus; ``references[i]`` is a list of references (or one string).

    Document frequencies come from the reference sets: df(g) counts the
    samples whose references contain g, and the weight is log(N / df).
    ``variant="d"`` clips candidate weights at the reference weights and
    applies a Gaussian penalty on the token-length difference; ``"plain"``
    uses the raw cosine. Both are scaled by 10 and averaged over references.
    """
    if variant not in ("d", "plain"):
        raise ValueError(f"unknown CIDEr variant {variant!r}")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    N = len(candidates)
    if N < 2:
        raise ValueError("CIDEr needs a corpus of at least two samples for document frequencies")
    cands = [as_tokens(c) for c in candidates]
    refs = [[as_tokens(r) for r in ([rs] if isinstance(rs, str) else rs)] for rs in references]
    log_n = math.log(N)
    scores = np.zeros(N)
    for n in range(1, max_n + 1):
        df = Counter()
        for rs in refs:
            df.update({g for r in rs for g in NGramCounter(r, n)})
        for i in range(N):
            cv, cn = _tfidf(cands[i], n, df, log_n)
            total = 0.0
            for r in refs[i]:
                rv, rn = _tfidf(r, n, df, log_n)
                if cn == 0 or rn == 0:
                    continue
                if variant == "d":
                    dot = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
                    pen = math.exp(-((len(cands[i]) - len(r)) ** 2) / (2 * sigma ** 2))
                else:
                    dot = sum(v * rv[g] for g, v in cv.items() if g in rv)
                    pen = 1.0
                total += pen * dot / (cn * rn)
            scores[i] += total / len(refs[i])
    scores = 10.0 * scores / max_n
    return CiderResult(scores, float(scores.mean()))


METRIC_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "cider")


def evaluate_corpus(candidates, references, cider_variant: str = "d") -> tuple[dict, list]:
    """Summary metrics plus per-sample rows.

    The summary BLEU is corpus BLEU; ROUGE-L and METEOR are sample means;
    CIDEr is the corpus mean.
    """
    refs = [[r] if isinstance(r, str) else list(r) for r in references]
    if not candidates:
        raise ValueError("cannot evaluate an empty split")
    cid = cider(candidates, refs, cider_variant) if len(candidates) > 1 else None
    rows = []
    for i, (c, rs) in enumerate(zip(candidates, refs)):
        b = bleu(c, rs)
        rows.append({"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
                     "rouge_l": rouge_l(c, [as_tokens(r) for r in rs]),
                     "meteor": meteor_lite(c, [as_tokens(r) for r in rs]),
                     "cider": float(cid.scores[i]) if cid is not None else float("nan")})
    cb = corpus_bleu(candidates, refs)
    summary = {"bleu1": cb[0], "bleu2": cb[1], "bleu3": cb[2], "bleu4": cb[3],
               "rouge_l": float(np.mean([r["rouge_l"] for r in rows])),
               "meteor": float(np.mean([r["meteor"] for r in rows])),
               "cider": cid.mean if cid is not None else float("nan")}
    return summary, rows


__all__ = ["NGramCounter", "BleuScores", "bleu", "corpus_bleu", "rouge_l", "lcs_length",
           "meteor_lite", "cider", "CiderResult", "evaluate_corpus", "METRIC_COLUMNS", "as_tokens"]
