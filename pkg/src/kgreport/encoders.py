"""Vision, text and knowledge encoders plus knowledge fusion.

The knowledge encoder aliases every non-attention tensor of the text encoder
(embeddings, positional table, feed-forward weights, layer norms) and owns
its self-attention. Knowledge enters the image pathway once, through a
post-norm cross-attention block over the final visual tokens.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus.tokenizer import PAD_ID
from .exceptions import ConfigError, ContractError
from .nn import (
    AttentionBlock,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerLayer,
    key_padding_bias,
    parameter,
    prepend,
)
from .tensor import Tensor, add, embedding, l2_normalize, no_grad


@dataclass
class ModelConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    proj_dim: int = 32
    patch: int = 8
    image_side: int = 32
    channels: int = 1
    max_len: int = 64
    ffn_hidden: int | None = None
    momentum: float = 0.995
    share_mode: str = "all_but_sa"
    vocab_size: int = 0
    queue_size: int = 256
    temperature: float = 0.07
    hard_negatives: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.image_side % self.patch:
            raise ConfigError(f"image side {self.image_side} is not divisible by patch {self.patch}")
        if self.share_mode not in ("all_but_sa", "sa_only"):
            raise ConfigError(f"unknown share_mode {self.share_mode!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisualFeatures:
    f_I: Tensor
    cls_projection: Tensor


@dataclass
class TextFeatures:
    h_T: Tensor
    cls_projection: Tensor | None = None
    mask: np.ndarray | None = None


@dataclass
class KnowledgeFeatures:
    h_K: Tensor
    mask: np.ndarray | None = None


@dataclass
class EnhancedVisualFeatures:
    features: Tensor
    weights: Tensor | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.features.shape


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), patches in row-major order."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} is not divisible into {patch}x{patch} patches")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


class VisionEncoder(Module):
    """Patch embedding, learned positions, a leading [CLS] row, bidirectional layers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.patch = cfg.patch
        self.side = cfg.image_side
        self.channels = cfg.channels
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, cfg.width, rng, dt)
        self.cls_token = parameter(rng.normal(0.0, 0.02, size=cfg.width).astype(dt))
        self.positions = parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches + 1, cfg.width)).astype(dt))
        self.layers = [TransformerLayer(cfg.width, cfg.heads, rng, ffn_hidden=cfg.ffn_hidden, dtype=dt)
                       for _ in range(cfg.layers)]
        self.ln_final = LayerNorm(cfg.width, dt)

    def __call__(self, images) -> Tensor:
        images = np.asarray(images, dtype=self.positions.dtype)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:3] != (self.side, self.side) or images.shape[3] != self.channels:
            raise ConfigError(f"expected images of shape (B, {self.side}, {self.side}, "
                              f"{self.channels}), got {images.shape}")
        tokens = self.patch_embed(Tensor(patchify(images, self.patch)))
        x = prepend(self.cls_token, tokens)
        B, L, d = x.shape
        x = x + _tile_rows(self.positions, B)
        for layer in self.layers:
            x = layer(x)
        return self.ln_final(x)


def _tile_rows(table: Tensor, batch: int) -> Tensor:
    return embedding(table, np.broadcast_to(np.arange(table.shape[0]), (batch, table.shape[0])))


class TextStack(Module):
    """BERT-style token stack; one class serves text encoder, knowledge encoder and decoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, *, cross: bool, causal: bool,
                 word=None, positions=None, ln_embed=None, layer_parts=None, ln_final=None):
        dt = cfg.np_dtype
        self.max_len = cfg.max_len
        self.causal = causal
        self.word = word or Embedding(cfg.vocab_size, cfg.width, rng, dt)
        self.positions = positions or Embedding(cfg.max_len, cfg.width, rng, dt)
        self.ln_embed = ln_embed or LayerNorm(cfg.width, dt)
        parts = layer_parts or [{} for _ in range(cfg.layers)]
        self.layers = [TransformerLayer(cfg.width, cfg.heads, rng, cross=cross,
                                        ffn_hidden=cfg.ffn_hidden, dtype=dt, **p) for p in parts]
        self.ln_final = ln_final or LayerNorm(cfg.width, dt)

    def embed(self, ids: np.ndarray) -> Tensor:
        B, L = ids.shape
        pos = np.broadcast_to(np.arange(L), (B, L))
        return self.ln_embed(add(self.word(ids), self.positions(pos)))

    def __call__(self, ids, mask=None, memory: Tensor | None = None, memory_mask=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, L = ids.shape
        if L > self.max_len:
            raise ContractError(f"sequence of {L} tokens exceeds max length {self.max_len}")
        if mask is None:
            mask = ids != PAD_ID
        self_bias = key_padding_bias(mask, L if self.causal else None)
        mem_bias = key_padding_bias(memory_mask) if memory_mask is not None else None
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, self_bias, memory, mem_bias)
        return self.ln_final(x)


def build_text_encoder(cfg: ModelConfig, rng) -> TextStack:
    return TextStack(cfg, rng, cross=True, causal=False)


def _layer_parts(layer: TransformerLayer, keys) -> dict:
    return {k: getattr(layer, k) for k in keys}


def build_knowledge_encoder(text: TextStack, cfg: ModelConfig, rng) -> TextStack:
    """Aliases all of ``text`` except attention; self-attention is fresh."""
    parts = [_layer_parts(l, ("ln_self", "ln_ffn", "ffn")) for l in text.layers]
    return TextStack(cfg, rng, cross=False, causal=False, word=text.word,
                     positions=text.positions, ln_embed=text.ln_embed, layer_parts=parts,
                     ln_final=text.ln_final)


class CrossAttentionFusion(Module):
    """LayerNorm(f_I + Attention(Q = f_I, K = V = h_K))."""

    def __init__(self, cfg: ModelConfig, rng):
        self.attn = AttentionBlock(cfg.width, cfg.heads, rng, cfg.np_dtype)
        self.ln = LayerNorm(cfg.width, cfg.np_dtype)

    def __call__(self, f_I: Tensor, h_K: Tensor, knowledge_mask=None, keep_weights=False):
        if f_I.shape[-1] != h_K.shape[-1]:
            raise ConfigError(f"fusion width mismatch: {f_I.shape} vs {h_K.shape}")
        bias = key_padding_bias(knowledge_mask) if knowledge_mask is not None else None
        ctx, weights = self.attn.attend(f_I, h_K, bias, return_weights=True)
        out = self.ln(f_I + self.attn.o(ctx))
        return EnhancedVisualFeatures(out, weights if keep_weights else None)


class ContrastiveBranch(Module):
    """The sub-network whose momentum copy produces contrastive targets."""

    def __init__(self, vision, knowledge, fusion, text, vision_proj, text_proj):
        self.vision = vision
        self.knowledge = knowledge
        self.fusion = fusion
        self.text = text
        self.vision_proj = vision_proj
        self.text_proj = text_proj

    def image_embedding(self, images, k_ids, k_mask) -> Tensor:
        f_I = self.vision(images)
        h_K = self.knowledge(k_ids, k_mask)
        enh = self.fusion(f_I, h_K, k_mask).features
        return l2_normalize(self.vision_proj(enh[:, 0]))

    def text_embedding(self, ids, mask) -> Tensor:
        return l2_normalize(self.text_proj(self.text(ids, mask)[:, 0]))

    def momentum_copy(self) -> "ContrastiveBranch":
        clone = copy.deepcopy(self)  # one deepcopy keeps the text/knowledge aliasing
        for p in clone.parameters():
            p.requires_grad = True
            p.grad = None
        return clone


def self_attention(x: Tensor, block: AttentionBlock, mask=None) -> Tensor:
    """Multi-head self-attention over (B, L, d) or (L, d); ``mask[i, j]`` True lets i see j."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[1], x.shape[1]):
            raise ContractError(f"mask must be {x.shape[1]}x{x.shape[1]}, got {mask.shape}")
        bias = np.where(mask, 0.0, -np.inf)[None, None]
    out = block(x, bias=bias)
    return out.reshape(*out.shape[1:]) if squeeze else out


def encode_image(images, vision: VisionEncoder, vision_proj: Linear) -> VisualFeatures:
    f_I = vision(images)
    return VisualFeatures(f_I, l2_normalize(vision_proj(f_I[:, 0])))


def encode_text(ids, text: TextStack, text_proj: Linear | None = None, mask=None,
                image: EnhancedVisualFeatures | None = None) -> TextFeatures:
    """Bidirectional encoding; with ``image`` each layer also cross-attends to it."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    mask = ids != PAD_ID if mask is None else mask
    memory = None if image is None else image.features
    h = text(ids, mask, memory=memory)
    proj = l2_normalize(text_proj(h[:, 0])) if text_proj is not None and image is None else None
    return TextFeatures(h, proj, mask)


def encode_knowledge(ids, knowledge: TextStack, mask=None) -> KnowledgeFeatures:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    mask = ids != PAD_ID if mask is None else mask
    return KnowledgeFeatures(knowledge(ids, mask), mask)


def fuse_cross_attention(f_I, h_K, fusion: CrossAttentionFusion) -> EnhancedVisualFeatures:
    f = f_I.f_I if isinstance(f_I, VisualFeatures) else f_I
    if isinstance(h_K, KnowledgeFeatures):
        return fusion(f, h_K.h_K, h_K.mask)
    return fusion(f, h_K)


def aligned_pairs(online, momentum) -> list:
    """(online, momentum) tensor pairs matched by parameter name, one per momentum tensor."""
    on = online.named_parameters() if isinstance(online, Module) else dict(online)
    mo = momentum.named_parameters() if isinstance(momentum, Module) else dict(momentum)
    if set(on) != set(mo):
        diff = sorted(set(on) ^ set(mo))
        raise ContractError(f"parameter lists are not aligned: {diff[:5]}")
    pairs, seen = [], set()
    for name, m in mo.items():
        if id(m) in seen:
            continue
        seen.add(id(m))
        o = on[name]
        if o.shape != m.shape:
            raise ContractError(f"{name}: shape {o.shape} vs {m.shape}")
        pairs.append((o, m))
    return pairs


def momentum_update(online, momentum, m: float) -> None:
    """momentum <- m * momentum + (1 - m) * online, in place, outside the tape."""
    if not 0.0 <= m < 1.0:
        raise ContractError(f"momentum coefficient must be in [0, 1), got {m}")
    with no_grad():
        for o, mo in aligned_pairs(online, momentum):
            mo.data *= m
            mo.data += (1.0 - m) * o.data.astype(mo.dtype)
