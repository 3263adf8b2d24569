"""Causal report decoder conditioned on knowledge-enhanced visual features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus.tokenizer import BOS_ID, CLS_ID, ENC_ID, EOS_ID, PAD_ID
from .encoders import EnhancedVisualFeatures, ModelConfig, TextStack, _layer_parts
from .exceptions import ContractError
from .nn import Module, parameter
from .tensor import Tensor, linear, log_softmax, no_grad, transpose

SHARED_WITH_ENCODER = {
    # everything except causal self-attention is the text encoder's
    "all_but_sa": ("ln_self", "ln_cross", "cross_attn", "ln_ffn", "ffn"),
    # only the self-attention blocks are the text encoder's
    "sa_only": ("self_attn",),
}


class Decoder(Module):
    """Causal stack with cross-attention and an output layer tied to the word table."""

    def __init__(self, cfg: ModelConfig, rng, text: TextStack | None = None):
        if text is None:
            self.stack = TextStack(cfg, rng, cross=True, causal=True)
        else:
            keys = SHARED_WITH_ENCODER[cfg.share_mode]
            parts = [_layer_parts(l, keys) for l in text.layers]
            if cfg.share_mode == "all_but_sa":
                self.stack = TextStack(cfg, rng, cross=True, causal=True, word=text.word,
                                       positions=text.positions, ln_embed=text.ln_embed,
                                       layer_parts=parts, ln_final=text.ln_final)
            else:
                self.stack = TextStack(cfg, rng, cross=True, causal=True, layer_parts=parts)
        self.lm_bias = parameter(np.zeros(cfg.vocab_size, dtype=cfg.np_dtype))

    @property
    def max_len(self) -> int:
        return self.stack.max_len

    def __call__(self, ids, visual, mask=None) -> Tensor:
        return forward_causal(ids, visual, self, mask)


def _visual_tensor(visual) -> Tensor:
    return visual.features if isinstance(visual, EnhancedVisualFeatures) else visual


def forward_causal(ids, visual, decoder: Decoder, mask=None) -> Tensor:
    """Logits (B, L, |V|); row t sees tokens 1..t and the visual features only."""
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    if ids.shape[1] < 1:
        raise ContractError("decoder input must contain at least [BOS]")
    if np.any(ids[:, 0] != BOS_ID):
        raise ContractError("decoder input must start with [BOS]")
    memory = _visual_tensor(visual)
    if memory.shape[0] != ids.shape[0]:
        raise ContractError(f"{ids.shape[0]} sequences but {memory.shape[0]} visual feature sets")
    h = decoder.stack(ids, mask, memory=memory)
    logits = linear(h, transpose(decoder.stack.word.table), decoder.lm_bias)
    return logits[0] if squeeze else logits


def sequence_log_prob(ids, visual, decoder: Decoder) -> float:
    """Sum of next-token log-probabilities of ``ids[1:]`` (teacher forcing, one sequence)."""
    ids = np.asarray(ids, dtype=np.int64)
    with no_grad():
        logp = log_softmax(forward_causal(ids[None, :-1], _visual_tensor(visual), decoder)).data[0]
    return float(logp[np.arange(len(ids) - 1), ids[1:]].sum())


# ids that only ever appear as structure, never as a report token
NEVER_GENERATED = (PAD_ID, BOS_ID, CLS_ID, ENC_ID)


def _next_log_probs(logits: np.ndarray) -> np.ndarray:
    """Full-vocabulary log-softmax with the structural ids pushed to -inf."""
    lp = logits - logits.max(axis=-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
    lp[..., list(NEVER_GENERATED)] = -np.inf
    return lp


@dataclass
class Generation:
    tokens: list
    truncated: bool
    log_prob: float


def _strip(seq) -> list:
    return [int(t) for t in seq if t not in (BOS_ID, EOS_ID, PAD_ID)]


def greedy_decode(visual, decoder: Decoder, max_len: int) -> list:
    """Batched argmax decoding; one ``Generation`` per row of ``visual``."""
    mem = _visual_tensor(visual)
    if max_len > decoder.max_len:
        raise ContractError(f"max_len {max_len} exceeds the position table ({decoder.max_len})")
    B = mem.shape[0]
    seqs = np.full((B, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    logps = np.zeros(B)
    with no_grad():
        while seqs.shape[1] < max_len and not done.all():
            lp = _next_log_probs(forward_causal(seqs, mem, decoder).data[:, -1])
            nxt = lp.argmax(axis=-1)  # argmax picks the lowest id on ties
            nxt = np.where(done, PAD_ID, nxt)
            logps += np.where(done, 0.0, lp[np.arange(B), nxt])
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    out = []
    for b in range(B):
        row = seqs[b].tolist()
        out.append(Generation(_strip(row), not done[b], float(logps[b])))
    return out


def beam_decode(visual, decoder: Decoder, max_len: int, beam_width: int = 3) -> Generation:
    """Length-normalized beam search over one visual feature set.

    Hypotheses are extended by cumulative log-probability. The answer is the
    candidate with the best log-probability per generated token among those
    whose total log-probability is at least the greedy path's; the greedy path
    itself is always a candidate, so beam search never scores below greedy.
    Ties go to the lower token id (then the earlier hypothesis).
    """
    mem = _visual_tensor(visual)
    if mem.shape[0] != 1:
        raise ContractError("beam_decode works on a single sample")
    if max_len > decoder.max_len:
        raise ContractError(f"max_len {max_len} exceeds the position table ({decoder.max_len})")
    if beam_width < 1:
        raise ContractError(f"beam width must be >= 1, got {beam_width}")
    greedy = greedy_decode(mem, decoder, max_len)[0]
    beams = [([BOS_ID], 0.0)]
    finished = []
    with no_grad():
        while beams and len(beams[0][0]) < max_len:
            seqs = np.array([b[0] for b in beams], dtype=np.int64)
            memk = Tensor(np.repeat(mem.data, len(beams), axis=0))
            lp = _next_log_probs(forward_causal(seqs, memk, decoder).data[:, -1])
            cands = []
            for bi, (seq, score) in enumerate(beams):
                top = np.lexsort((np.arange(lp.shape[1]), -lp[bi]))[:beam_width]
                for tok in top:
                    cands.append((score + float(lp[bi, tok]), bi, int(tok), seq + [int(tok)]))
            cands.sort(key=lambda c: (-c[0], c[2], c[1]))
            beams = []
            for score, _, tok, seq in cands[:beam_width]:
                (finished if tok == EOS_ID else beams).append((seq, score))
            if len(finished) >= beam_width:
                break
    g_seq = [BOS_ID] + greedy.tokens + ([] if greedy.truncated else [EOS_ID])
    pool = [(seq, score) for seq, score in (finished or beams) if score >= greedy.log_prob]
    pool.append((g_seq, greedy.log_prob))
    best_seq, best_score = max(pool, key=lambda c: (c[1] / max(1, len(c[0]) - 1),
                                                    [-t for t in c[0]]))
    return Generation(_strip(best_seq), best_seq[-1] != EOS_ID, best_score)


def generate(visual, decoder: Decoder, strategy: str = "greedy", max_len: int | None = None,
             beam_width: int = 3) -> list:
    """Decode every row of ``visual``; outputs exclude [BOS]/[EOS]."""
    max_len = max_len or decoder.max_len
    if strategy == "greedy":
        return greedy_decode(visual, decoder, max_len)
    if strategy == "beam":
        mem = _visual_tensor(visual)
        return [beam_decode(Tensor(mem.data[b:b + 1]), decoder, max_len, beam_width)
                for b in range(mem.shape[0])]
    raise ContractError(f"unknown decoding strategy {strategy!r}")
