"""Parameter containers and the small layers the encoders are assembled from."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, DimensionError
from .tensor import (
    Tensor,
    concat,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    scale,
    softmax_rows,
    transpose,
)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Module:
    """Anything holding parameters or sub-modules as attributes.

    Sharing a parameter between two modules is done by assigning the same
    object to both, so ``named_parameters`` may list one tensor under several
    names; ``parameters`` deduplicates by identity.
    """

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list:
        seen, params = set(), []
        for p in self.named_parameters().values():
            if id(p) not in seen:
                seen.add(id(p))
                params.append(p)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = uniform_init(rng, (n_in, n_out), n_in, dtype)
        self.bias = uniform_init(rng, (n_out,), n_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float64):
        self.gain = parameter(np.ones(width, dtype=dtype))
        self.bias = parameter(np.zeros(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, dtype=np.float64):
        # N(0, 0.02) like BERT; fan-in init would make token vectors tiny
        self.table = parameter(rng.normal(0.0, 0.02, size=(count, width)).astype(dtype))

    def __call__(self, ids) -> Tensor:
        return embedding(self.table, ids)


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.up = Linear(width, hidden, rng, dtype)
        self.down = Linear(hidden, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


def key_padding_bias(key_mask: np.ndarray | None, causal_len: int | None = None):
    """Additive attention bias of shape (B, 1, L, S) or broadcastable.

    ``key_mask`` is (B, S) with True where a key may be attended; a causal
    length adds the lower-triangular restriction.
    """
    bias = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, -np.inf)[:, None, None, :]
    if causal_len is not None:
        causal = np.where(np.tril(np.ones((causal_len, causal_len), dtype=bool)), 0.0, -np.inf)
        bias = causal[None, None] if bias is None else bias + causal[None, None]
    return bias


class AttentionBlock(Module):
    """Multi-head scaled dot-product attention with input/output projections."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        if width % n_heads:
            raise ConfigError(f"width {width} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_k = width // n_heads
        self.q = Linear(width, width, rng, dtype)
        self.k = Linear(width, width, rng, dtype)
        self.v = Linear(width, width, rng, dtype)
        self.o = Linear(width, width, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return transpose(x.reshape(B, L, self.n_heads, self.d_k), (0, 2, 1, 3))

    def attend(self, queries: Tensor, keys: Tensor, bias=None, return_weights=False):
        """Attention output before the output projection, heads concatenated."""
        if queries.shape[-1] != keys.shape[-1]:
            raise ConfigError(f"attention width mismatch: {queries.shape} vs {keys.shape}")
        if keys.shape[0] != queries.shape[0]:
            raise DimensionError(f"attention batch mismatch: {queries.shape} vs {keys.shape}")
        B, L, d = queries.shape
        q = self._split(self.q(queries))
        k = self._split(self.k(keys))
        v = self._split(self.v(keys))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.d_k))
        weights = softmax_rows(scores, bias)
        ctx = transpose(matmul(weights, v), (0, 2, 1, 3)).reshape(B, L, d)
        return (ctx, weights) if return_weights else ctx

    def __call__(self, queries: Tensor, keys: Tensor | None = None, bias=None) -> Tensor:
        keys = queries if keys is None else keys
        return self.o(self.attend(queries, keys, bias))


class TransformerLayer(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward.

    Sub-modules can be injected to alias parameters with another layer.
    """

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, *, cross: bool = False,
                 ffn_hidden: int | None = None, dtype=np.float64, self_attn=None, ln_self=None,
                 cross_attn=None, ln_cross=None, ffn=None, ln_ffn=None):
        hidden = ffn_hidden or 4 * width
        self.ln_self = ln_self or LayerNorm(width, dtype)
        self.self_attn = self_attn or AttentionBlock(width, n_heads, rng, dtype)
        if cross:
            self.ln_cross = ln_cross or LayerNorm(width, dtype)
            self.cross_attn = cross_attn or AttentionBlock(width, n_heads, rng, dtype)
        else:
            self.ln_cross = None
            self.cross_attn = None
        self.ln_ffn = ln_ffn or LayerNorm(width, dtype)
        self.ffn = ffn or FeedForward(width, hidden, rng, dtype)

    def __call__(self, x: Tensor, self_bias=None, memory: Tensor | None = None,
                 memory_bias=None) -> Tensor:
        x = x + self.self_attn(self.ln_self(x), bias=self_bias)
        if memory is not None:
            if self.cross_attn is None:
                raise ConfigError("layer was built without cross-attention")
            x = x + self.cross_attn(self.ln_cross(x), memory, bias=memory_bias)
        return x + self.ffn(self.ln_ffn(x))


def prepend(token: Tensor, x: Tensor) -> Tensor:
    """Stack a learned (d,) row in front of every sequence of x (B, L, d)."""
    B, _, d = x.shape
    rows = embedding(token.reshape(1, d), np.zeros((B, 1), dtype=np.int64))
    return concat([rows, x], axis=1)
