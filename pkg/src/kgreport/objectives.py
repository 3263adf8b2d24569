"""Contrastive, matching and language-modeling losses, their sum, and the node BCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus.tokenizer import PAD_ID
from .exceptions import ContractError
from .nn import parameter
from .tensor import Tensor, clip, cross_entropy, log, mean, mul, reciprocal

TAU_RANGE = (0.005, 0.5)
PROB_EPS = 1e-7


class ContrastiveState:
    """Learnable temperature plus FIFO queues of momentum projections.

    The queues hold the most recent ``capacity`` image and text projections,
    oldest first. Capacity 0 leaves only in-batch negatives.
    """

    def __init__(self, dim: int, capacity: int = 256, temperature: float = 0.07, dtype=np.float64):
        if temperature <= 0:
            raise ContractError(f"temperature must be positive, got {temperature}")
        self.dim = dim
        self.capacity = int(capacity)
        self.temperature = parameter(np.asarray(temperature, dtype=dtype))
        self.image_queue = np.zeros((0, dim), dtype=dtype)
        self.text_queue = np.zeros((0, dim), dtype=dtype)

    @property
    def tau(self) -> float:
        return float(self.temperature.data)

    def clamp(self) -> None:
        self.temperature.data[...] = np.clip(self.temperature.data, *TAU_RANGE)

    def enqueue(self, image_proj: np.ndarray, text_proj: np.ndarray) -> None:
        if self.capacity == 0:
            return
        dt = self.image_queue.dtype
        self.image_queue = np.concatenate([self.image_queue, np.asarray(image_proj, dt)])[-self.capacity:]
        self.text_queue = np.concatenate([self.text_queue, np.asarray(text_proj, dt)])[-self.capacity:]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def itc_loss(image_proj, text_proj, state: ContrastiveState, image_proj_m=None, text_proj_m=None,
             update_queue: bool = True) -> Tensor:
    """Symmetric InfoNCE with dot-product similarity at temperature ``state.temperature``.

    Row i of ``image_proj`` is scored against every momentum text projection in
    the batch followed by the text queue; its positive is column i. The
    text-to-image direction mirrors this. Without momentum projections the
    online ones are used as constants. The queues are updated afterwards.
    """
    image_proj, text_proj = _as_tensor(image_proj), _as_tensor(text_proj)
    if image_proj.ndim != 2 or image_proj.shape != text_proj.shape:
        raise ContractError(f"projection batches must match: {image_proj.shape} vs {text_proj.shape}")
    if state.tau <= 0:
        raise ContractError(f"temperature must be positive, got {state.tau}")
    B = image_proj.shape[0]
    img_m = image_proj.data if image_proj_m is None else np.asarray(getattr(image_proj_m, "data", image_proj_m))
    txt_m = text_proj.data if text_proj_m is None else np.asarray(getattr(text_proj_m, "data", text_proj_m))
    text_all = Tensor(np.concatenate([txt_m, state.text_queue.astype(txt_m.dtype)]))
    image_all = Tensor(np.concatenate([img_m, state.image_queue.astype(img_m.dtype)]))
    inv_tau = reciprocal(state.temperature)
    sim_i2t = mul(image_proj @ text_all.T, inv_tau)
    sim_t2i = mul(text_proj @ image_all.T, inv_tau)
    targets = np.arange(B)
    loss = (cross_entropy(sim_i2t, targets) + cross_entropy(sim_t2i, targets)) * 0.5
    if update_queue:
        state.enqueue(img_m, txt_m)
    return loss


def itm_loss(logits, labels) -> Tensor:
    """Cross-entropy of a two-way match head: column 1 is P(match)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError(f"itm_loss expects (N, 2) logits for N labels, got {logits.shape}")
    return cross_entropy(logits, labels)


def itm_pairs(reports, rng: np.random.Generator, similarity: np.ndarray | None = None):
    """Pick one mismatched image per text for a balanced positive/negative ITM batch.

    Candidates are images whose report text differs from the anchor's; with
    ``similarity`` the pick is weighted by ``softmax(similarity)`` (hard
    negatives), otherwise uniform. Returns ``(negative_index, positives_only)``
    where ``positives_only`` is True when no negative could be formed.
    """
    B = len(reports)
    if B < 2:
        return np.zeros(0, dtype=np.int64), True
    neg = np.empty(B, dtype=np.int64)
    for i in range(B):
        cands = np.array([j for j in range(B) if reports[j] != reports[i]])
        if len(cands) == 0:
            cands = np.array([j for j in range(B) if j != i])
        if similarity is not None:
            w = similarity[i, cands] - similarity[i, cands].max()
            w = np.exp(w)
            neg[i] = rng.choice(cands, p=w / w.sum())
        else:
            neg[i] = rng.choice(cands)
    return neg, False


def lm_loss(logits, targets, pad_id: int = PAD_ID) -> Tensor:
    """Mean next-token cross-entropy over non-pad target positions."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not line up with targets {targets.shape}")
    if np.all(targets == pad_id):
        raise ContractError("lm_loss: every target position is padding")
    return cross_entropy(logits, targets, ignore_index=pad_id)


def bce_loss(probabilities, labels) -> Tensor:
    """Mean binary cross-entropy over all slots, probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = clip(_as_tensor(probabilities), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=p.dtype)
    if y.shape != p.shape:
        raise ContractError(f"bce_loss: probabilities {p.shape} vs labels {y.shape}")
    terms = mul(log(p), Tensor(y)) + mul(log(1.0 - p), Tensor(1.0 - y))
    return -mean(terms)


@dataclass
class LossBreakdown:
    l_itc: Tensor
    l_itm: Tensor
    l_lm: Tensor
    total: Tensor
    itm_positives_only: bool = False

    def as_floats(self) -> dict:
        return {"l_itc": float(self.l_itc.data), "l_itm": float(self.l_itm.data),
                "l_lm": float(self.l_lm.data), "total": float(self.total.data)}


def total_loss(l_itc, l_itm, l_lm, itm_positives_only: bool = False) -> LossBreakdown:
    """Unweighted sum of the three generation losses."""
    parts = [_as_tensor(x) for x in (l_itc, l_itm, l_lm)]
    total = parts[0] + parts[1] + parts[2]
    return LossBreakdown(*parts, total, itm_positives_only)


__all__ = ["ContrastiveState", "itc_loss", "itm_loss", "itm_pairs", "lm_loss", "bce_loss",
           "LossBreakdown", "total_loss", "TAU_RANGE"]
