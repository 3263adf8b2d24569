"""Knowledge-conditioned report generator: model assembly, training step, estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .classifier import nodes_to_knowledge_text
from .corpus.graph import build_node_vocabulary
from .corpus.synth import build_vocabulary
from .corpus.tokenizer import BOS_ID, CLS_ID, ENC_ID, EOS_ID, PAD_ID, Vocabulary
from .decoder import Decoder, forward_causal, generate
from .encoders import (
    ContrastiveBranch,
    CrossAttentionFusion,
    ModelConfig,
    VisionEncoder,
    build_knowledge_encoder,
    build_text_encoder,
    momentum_update,
)
from .nn import Linear, Module
from .objectives import ContrastiveState, itc_loss, itm_loss, itm_pairs, lm_loss, total_loss
from .optim import AdamW
from .tensor import concat, l2_normalize, no_grad
from .validation import check_images, check_is_fitted


def pad_sequences(seqs, pad: int = PAD_ID):
    """Right-pad id lists to a (B, L) array; returns ``(ids, mask)``."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, ids != pad


@dataclass
class Batch:
    images: np.ndarray
    k_ids: np.ndarray
    k_mask: np.ndarray
    t_ids: np.ndarray
    e_ids: np.ndarray
    t_mask: np.ndarray
    dec_in: np.ndarray
    dec_tgt: np.ndarray
    reports: list


def knowledge_ids(texts, vocab: Vocabulary, max_len: int):
    return pad_sequences([[CLS_ID] + vocab.tokenize(t)[:max_len - 1] for t in texts])


def make_batch(images, reports, knowledge_texts, vocab: Vocabulary, max_len: int) -> Batch:
    toks = [vocab.tokenize(r)[:max_len - 1] for r in reports]
    t_ids, t_mask = pad_sequences([[CLS_ID] + t for t in toks])
    e_ids = t_ids.copy()
    e_ids[:, 0] = ENC_ID
    dec_in, _ = pad_sequences([[BOS_ID] + t for t in toks])
    dec_tgt, _ = pad_sequences([t + [EOS_ID] for t in toks])
    k_ids, k_mask = knowledge_ids(knowledge_texts, vocab, max_len)
    return Batch(np.asarray(images), k_ids, k_mask, t_ids, e_ids, t_mask, dec_in, dec_tgt,
                 list(reports))


class KnowledgeReportModel(Module):
    """Every trainable part of the generator plus the momentum branch.

    ``momentum`` mirrors (vision, knowledge, fusion, text, projections) and is
    updated by exponential moving average only.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.cfg = cfg
        self.vision = VisionEncoder(cfg, rng)
        self.text = build_text_encoder(cfg, rng)
        self.knowledge = build_knowledge_encoder(self.text, cfg, rng)
        self.fusion = CrossAttentionFusion(cfg, rng)
        self.decoder = Decoder(cfg, rng, text=self.text)
        self.vision_proj = Linear(cfg.width, cfg.proj_dim, rng, dt)
        self.text_proj = Linear(cfg.width, cfg.proj_dim, rng, dt)
        self.itm_head = Linear(cfg.width, 2, rng, dt)
        self.contrast = ContrastiveState(cfg.proj_dim, cfg.queue_size, cfg.temperature, dt)
        self.temperature = self.contrast.temperature
        self.momentum = self.branch().momentum_copy()

    def branch(self) -> ContrastiveBranch:
        return ContrastiveBranch(self.vision, self.knowledge, self.fusion, self.text,
                                 self.vision_proj, self.text_proj)

    def online_parameters(self) -> list:
        frozen = {id(p) for p in self.momentum.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def enhanced_visual(self, images, k_ids, k_mask, keep_weights: bool = False):
        f_I = self.vision(images)
        h_K = self.knowledge(k_ids, k_mask)
        return self.fusion(f_I, h_K, k_mask, keep_weights=keep_weights)

    def losses(self, batch: Batch, rng: np.random.Generator):
        """The three losses on one batch; returns ``(LossBreakdown, momentum projections)``."""
        enh = self.enhanced_visual(batch.images, batch.k_ids, batch.k_mask).features
        img_proj = l2_normalize(self.vision_proj(enh[:, 0]))
        txt_proj = l2_normalize(self.text_proj(self.text(batch.t_ids, batch.t_mask)[:, 0]))
        with no_grad():
            img_m = self.momentum.image_embedding(batch.images, batch.k_ids, batch.k_mask).data
            txt_m = self.momentum.text_embedding(batch.t_ids, batch.t_mask).data
        l_itc = itc_loss(img_proj, txt_proj, self.contrast, img_m, txt_m, update_queue=False)

        sim = txt_proj.data @ img_proj.data.T / self.contrast.tau if self.cfg.hard_negatives else None
        neg, positives_only = itm_pairs(batch.reports, rng, sim)
        B = len(batch.reports)
        if positives_only:
            mem, ids, mask = enh, batch.e_ids, batch.t_mask
            labels = np.ones(B, dtype=np.int64)
        else:
            mem = concat([enh, enh[neg]], axis=0)
            ids = np.concatenate([batch.e_ids, batch.e_ids])
            mask = np.concatenate([batch.t_mask, batch.t_mask])
            labels = np.concatenate([np.ones(B), np.zeros(B)]).astype(np.int64)
        h = self.text(ids, mask, memory=mem)
        l_itm = itm_loss(self.itm_head(h[:, 0]), labels)

        logits = forward_causal(batch.dec_in, enh, self.decoder)
        l_lm = lm_loss(logits, batch.dec_tgt)
        return total_loss(l_itc, l_itm, l_lm, positives_only), (img_m, txt_m)

    def train_step(self, batch: Batch, opt: AdamW, rng: np.random.Generator) -> dict:
        opt.zero_grad()
        parts, (img_m, txt_m) = self.losses(batch, rng)
        parts.total.backward()
        opt.step()
        self.contrast.clamp()
        momentum_update(self.branch(), self.momentum, self.cfg.momentum)
        self.contrast.enqueue(img_m, txt_m)
        row = parts.as_floats()
        row["tau"] = self.contrast.tau
        return row

    def generate(self, images, knowledge_texts, vocab: Vocabulary, strategy: str = "greedy",
                 max_len: int | None = None, beam_width: int = 3) -> list:
        k_ids, k_mask = knowledge_ids(knowledge_texts, vocab, self.cfg.max_len)
        with no_grad():
            enh = self.enhanced_visual(images, k_ids, k_mask)
            return generate(enh, self.decoder, strategy, max_len, beam_width)


TRAIN_LOG_COLUMNS = ("step", "l_itc", "l_itm", "l_lm", "total", "tau")


def as_knowledge_texts(knowledge, n: int, graph=None) -> list:
    """Accept a (n, 27) label matrix or a list of ready-made knowledge strings."""
    if isinstance(knowledge, (list, tuple)) and knowledge and isinstance(knowledge[0], str):
        texts = list(knowledge)
    else:
        K = np.asarray(knowledge)
        if K.ndim != 2:
            raise ValueError(f"knowledge must be a label matrix or list of strings, got {K.shape}")
        graph = graph or build_node_vocabulary()
        texts = [nodes_to_knowledge_text(row, graph) for row in K]
    if len(texts) != n:
        raise ValueError(f"{len(texts)} knowledge entries for {n} images")
    return texts


class ReportGenerator(BaseEstimator):
    """Estimator wrapper: ``fit(images, reports, knowledge)`` and ``predict(images, knowledge)``.

    ``knowledge`` is a (n, 27) node-label matrix or a list of knowledge
    strings. With ``eval_set`` the weights of the epoch with the best
    validation corpus BLEU-4 are kept (checked every ``eval_every`` epochs).
    """

    def __init__(self, width: int = 64, layers: int = 2, heads: int = 4, proj_dim: int = 32,
                 patch: int = 8, image_side: int = 32, channels: int = 1, max_len: int = 64,
                 share_mode: str = "all_but_sa", queue_size: int = 256, momentum: float = 0.995,
                 temperature: float = 0.07, hard_negatives: bool = False, epochs: int = 30,
                 batch_size: int = 16, lr: float = 1e-4, weight_decay: float = 5e-5,
                 seed: int = 0, dtype: str = "float32", strategy: str = "greedy",
                 beam_width: int = 3, eval_every: int = 1):
        self.width = width
        self.layers = layers
        self.heads = heads
        self.proj_dim = proj_dim
        self.patch = patch
        self.image_side = image_side
        self.channels = channels
        self.max_len = max_len
        self.share_mode = share_mode
        self.queue_size = queue_size
        self.momentum = momentum
        self.temperature = temperature
        self.hard_negatives = hard_negatives
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.dtype = dtype
        self.strategy = strategy
        self.beam_width = beam_width
        self.eval_every = eval_every

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(width=self.width, layers=self.layers, heads=self.heads,
                           proj_dim=self.proj_dim, patch=self.patch, image_side=self.image_side,
                           channels=self.channels, max_len=self.max_len,
                           momentum=self.momentum, share_mode=self.share_mode,
                           vocab_size=vocab_size, queue_size=self.queue_size,
                           temperature=self.temperature, hard_negatives=self.hard_negatives,
                           dtype=self.dtype)

    def init_model(self, vocab: Vocabulary | None = None) -> "ReportGenerator":
        self.vocab_ = vocab or build_vocabulary()
        self.model_ = KnowledgeReportModel(self.model_config(len(self.vocab_)), self.seed)
        self.train_log_ = []
        self.history_ = []
        return self

    def fit(self, X, reports, knowledge, eval_set=None, log=None):
        from .nlg_metrics import corpus_bleu  # metrics import the tokenizer only

        X = check_images(X, self.image_side, self.channels)
        reports = list(reports)
        if len(reports) != len(X):
            raise ValueError(f"{len(reports)} reports for {len(X)} images")
        texts = as_knowledge_texts(knowledge, len(X))
        self.init_model()
        model, vocab = self.model_, self.vocab_
        opt = AdamW(model.online_parameters(), lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng([self.seed, 2])
        dt = model.cfg.np_dtype
        best, best_state, step = -np.inf, None, 0
        params = model.parameters()
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(X))
            sums = {}
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                batch = make_batch(X[idx].astype(dt), [reports[i] for i in idx],
                                   [texts[i] for i in idx], vocab, self.max_len)
                row = model.train_step(batch, opt, rng)
                step += 1
                self.train_log_.append({"step": step, **row})
                for k, v in row.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
            summary = {"epoch": epoch, **{k: v / len(X) for k, v in sums.items()}}
            if eval_set is not None and (epoch % self.eval_every == 0 or epoch == self.epochs):
                preds = self.predict(eval_set[0], eval_set[2])
                summary["val_bleu4"] = corpus_bleu(preds, [[r] for r in eval_set[1]])[3]
                if summary["val_bleu4"] > best:
                    best = summary["val_bleu4"]
                    best_state = [p.data.copy() for p in params]
                    self.best_epoch_ = epoch
            self.history_.append(summary)
            if log is not None:
                log(summary)
        if best_state is not None:
            for p, saved in zip(params, best_state):
                p.data[...] = saved
        return self

    def generate(self, X, knowledge, strategy: str | None = None, max_len: int | None = None,
                 batch_size: int = 128) -> list:
        """Token-level ``Generation`` records (ids without [BOS]/[EOS])."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side, self.channels)
        texts = as_knowledge_texts(knowledge, len(X))
        dt = self.model_.cfg.np_dtype
        out = []
        for start in range(0, len(X), batch_size):
            out += self.model_.generate(X[start:start + batch_size].astype(dt),
                                        texts[start:start + batch_size], self.vocab_,
                                        strategy or self.strategy, max_len or self.max_len,
                                        self.beam_width)
        return out

    def predict(self, X, knowledge, **kwargs) -> list:
        return [self.vocab_.detokenize(g.tokens) for g in self.generate(X, knowledge, **kwargs)]

    def lm_loss_on(self, X, reports, knowledge) -> float:
        """Mean teacher-forced LM loss (no parameter update)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side, self.channels)
        texts = as_knowledge_texts(knowledge, len(X))
        dt = self.model_.cfg.np_dtype
        b = make_batch(X.astype(dt), list(reports), texts, self.vocab_, self.max_len)
        with no_grad():
            enh = self.model_.enhanced_visual(b.images, b.k_ids, b.k_mask).features
            return float(lm_loss(forward_causal(b.dec_in, enh, self.model_.decoder), b.dec_tgt).data)

    def save(self, path):
        check_is_fitted(self, "model_")
        extra = {"vocab": self.vocab_.to_list(),
                 "queues": {"image": self.model_.contrast.image_queue.tolist(),
                            "text": self.model_.contrast.text_queue.tolist()}}
        return save_checkpoint(path, self.model_.named_parameters(), "report-generator",
                               self.get_params(), extra)

    @classmethod
    def load(cls, path) -> "ReportGenerator":
        meta, arrays = read_checkpoint(path)
        if meta["kind"] != "report-generator":
            raise CheckpointError(f"{path} holds a {meta['kind']!r}, not a report generator")
        gen = cls(**meta["config"]).init_model(Vocabulary.from_list(meta["extra"]["vocab"]))
        load_into(gen.model_.named_parameters(), arrays)
        dt = gen.model_.cfg.np_dtype
        q = meta["extra"].get("queues", {})
        if q.get("image"):
            gen.model_.contrast.image_queue = np.asarray(q["image"], dtype=dt)
            gen.model_.contrast.text_queue = np.asarray(q["text"], dtype=dt)
        return gen


__all__ = ["KnowledgeReportModel", "ReportGenerator", "Batch", "make_batch", "pad_sequences",
           "knowledge_ids", "as_knowledge_texts", "TRAIN_LOG_COLUMNS"]
