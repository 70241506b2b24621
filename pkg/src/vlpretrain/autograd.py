"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each op returns a new :class:`Tensor` holding references to its parents and a
closure that pushes the output gradient back to them.  ``Tensor.backward``
orders the recorded graph topologically and runs every closure exactly once,
accumulating gradients additively, so shared subexpressions are handled
without special casing.

Only what the model needs is here; shapes are static apart from the batch axis.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, LabelError, ShapeError

DTYPE = np.float64
BCE_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # never update in place: incoming arrays may be shared between parents
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- reverse pass ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = graph(self)
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def graph(root: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: a._accum(g * c), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        x._accum(g * out * (1.0 - out))

    return Tensor._make(out, (x,), bw, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z / np.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        x._accum(g * (cdf + z * pdf))

    return Tensor._make(z * cdf, (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def bw(g):
        x._accum(g * keep)

    return Tensor._make(np.where(keep, x.data, 0.0), (x,), bw, "relu")


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; ``mode="eval"`` returns ``x`` itself."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        x._accum(g * keep)

    return Tensor._make(x.data * keep, (x,), bw, "dropout")


# -- shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(src)), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: x._accum(g.transpose(inv)), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            t._accum(part)

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        x._accum(full)

    return Tensor._make(x.data[key], (x,), bw, "index")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        x._accum(full)

    return Tensor._make(x.data[rows], (x,), bw, "take_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    d = table.shape[-1]

    def bw(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, d))
        table._accum(full)

    return Tensor._make(table.data[ids], (table,), bw, "embedding")


# -- reductions -----------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is None:
            x._accum(np.broadcast_to(g, src))
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), src))

    return Tensor._make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    src = x.shape
    return Tensor._make(np.asarray(x.data.mean()), (x,), lambda g: x._accum(np.full(src, g / n)), "mean")


def add_n(xs: Iterable[Tensor]) -> Tensor:
    xs = list(xs)
    out = xs[0]
    for t in xs[1:]:
        out = add(out, t)
    return out


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (``a.ndim, b.ndim >= 2``)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` with a 2-D weight."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    return Tensor._make(out, parents, bw, "linear")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm over a degenerate axis of size {d}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    xc -= xc.mean(axis=-1, keepdims=True)  # second pass: near-constant rows otherwise keep rounding residue
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x._accum(dx)

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get zero weight."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return Tensor._make(p, (x,), bw, "softmax")


# -- losses ---------------------------------------------------------------------

def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_ce expects logits [n, K] and labels [n]; got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"class label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        logits._accum(p * (g / n))

    return Tensor._make(np.asarray(loss), (logits,), bw, "softmax_ce")


def binary_ce(p: Tensor, y, eps: float = BCE_EPS) -> Tensor:
    """Mean of ``-[y ln p + (1-y) ln(1-p)]`` with ``p`` clamped to ``[eps, 1-eps]``."""
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != p.shape:
        raise ShapeError(f"binary_ce shape mismatch: {p.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("binary labels must be 0 or 1")
    pc = np.clip(p.data, eps, 1.0 - eps)
    n = max(p.data.size, 1)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def bw(g):
        d = (-y / pc + (1.0 - y) / (1.0 - pc)) * inside
        p._accum(d * (g / n))

    return Tensor._make(np.asarray(loss), (p,), bw, "binary_ce")


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Sum over rows of the squared Euclidean distance."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def bw(g):
        a._accum(2.0 * g * diff)
        b._accum(-2.0 * g * diff)

    return Tensor._make(np.asarray(float((diff * diff).sum())), (a, b), bw, "l2_loss")
