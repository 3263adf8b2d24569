"""Dense tensors with tape-based reverse-mode differentiation.

Broadcasting is deliberately narrow: binary elementwise ops accept either two
tensors of identical shape or a tensor and a scalar. Ops that need a bias or
gain over the last axis (``linear``, ``layer_norm``) carry their own gradient
rules instead of relying on implicit broadcasting.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericalError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax_rows",
    "log_softmax",
    "gelu",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "layer_norm",
    "linear",
    "embedding",
    "concat",
    "l2_normalize",
    "cross_entropy",
    "clip",
    "conv2d",
    "max_pool2d",
    "grad_check",
]


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array that remembers how it was computed.

    ``_parents`` and ``_backward`` form one entry of the tape: given the
    gradient of the output, ``_backward`` returns one gradient (or ``None``)
    per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- backward -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        Intermediate tensors receive the gradient of this call only; leaves
        accumulate across calls until ``zero_grad``.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_operand(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and g.ndim > 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_operand(a, b)
    b = _as_operand(b, a)
    _check_binary(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_operand(a, b)
    b = _as_operand(b, a)
    _check_binary(a, b, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a Python float keeps the array dtype
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- shape ops --------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across the leading axes of ``a``, or
    carry exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias shared across all leading axes."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} for weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        flat = ids.reshape(-1)
        g2 = g.reshape(-1, table.shape[1])
        if table.shape[0] <= 1024:
            # one-hot product: much faster than np.add.at for small tables
            onehot = np.zeros((table.shape[0], flat.size), dtype=g.dtype)
            onehot[flat, np.arange(flat.size)] = 1
            return (onehot @ g2,)
        full = np.zeros_like(table.data)
        np.add.at(full, flat, g2)
        return (full,)

    return _make(table.data[ids], (table,), backward)


# -- normalizers ------------------------------------------------------------
def softmax_rows(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``bias`` is an optional constant added before normalizing (``-inf`` masks
    a position); it broadcasts against ``x`` and receives no gradient.
    """
    if np.isnan(x.data).any():
        raise NumericalError("softmax_rows: NaN in input")
    z = x.data if bias is None else x.data + np.asarray(bias, dtype=x.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericalError("log_softmax: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: parameter shape {p.shape} for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        flat = g.reshape(-1, d)
        if gain is not None:
            grads.append((flat * xhat.reshape(-1, d)).sum(axis=0))
        if bias is not None:
            grads.append(flat.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), backward)


# -- losses -----------------------------------------------------------------
def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows whose target is kept."""
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target is ignored")
    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (g / count)).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- convolution ------------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel: int = 3) -> Tensor:
    """Same-padded stride-1 convolution on NHWC input.

    ``weight`` has shape ``(kernel * kernel * C_in, C_out)``; rows are ordered
    (channel, dy, dx), matching ``sliding_window_view`` output.
    """
    B, H, W, C = x.shape
    if weight.shape[0] != kernel * kernel * C:
        raise DimensionError(f"conv2d: weight {weight.shape} for input {x.shape}")
    pad = kernel // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    cols = windows.reshape(B * H * W, C * kernel * kernel)
    out = cols @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, H, W, -1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(B * H * W, -1)
        gw = cols.T @ g2
        gx = None
        if x.requires_grad:
            gcols = (g2 @ weight.data.T).reshape(B, H, W, C, kernel, kernel)
            gxp = np.zeros_like(xp)
            for dy in range(kernel):
                for dx in range(kernel):
                    gxp[:, dy:dy + H, dx:dx + W, :] += gcols[..., dy, dx]
            gx = gxp[:, pad:pad + H, pad:pad + W, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    B, H, W, C = x.shape
    if H % size or W % size:
        raise DimensionError(f"max_pool2d: input {x.shape} not divisible by {size}")
    blocks = x.data.reshape(B, H // size, size, W // size, size, C)
    out = blocks.max(axis=(2, 4))
    winner = blocks == out[:, :, None, :, None, :]
    # ties: keep only the first maximum so gradient mass is not duplicated
    flat = winner.transpose(0, 1, 3, 5, 2, 4).reshape(-1, size * size)
    first = np.zeros_like(flat)
    first[np.arange(flat.shape[0]), flat.argmax(axis=1)] = True
    winner = first.reshape(B, H // size, W // size, C, size, size).transpose(0, 1, 4, 2, 5, 3)

    def backward(g):
        gb = winner * g[:, :, None, :, None, :]
        return (gb.reshape(B, H, W, C),)

    return _make(out, (x,), backward)


# -- verification -----------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between backward() and central differences.

    Relative error per element is ``|a - n| / max(1, |a|, |n|)``. When
    ``max_elements`` is set, only that many randomly chosen coordinates are
    probed. ``x`` is perturbed in place and restored.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was
    x.grad = None
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        idx = np.random.default_rng(seed).choice(flat.size, size=max_elements, replace=False)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(x).data)
            flat[i] = orig - eps
            down = float(f(x).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list:
    """Deduplicate tensors by identity, preserving first-seen order."""
    seen, out = set(), []
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out
