"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op in this module builds a node in an implicit graph.  Nodes carry a
monotonically increasing sequence number, so reverse insertion order is a
valid topological order for the backward sweep.  A graph can be swept
exactly once; the second call raises :class:`ContractError`.

Broadcasting is deliberately narrow: the only implicit expansion is adding
a 1-D bias over the last axis.  Every other shape mismatch is a
:class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ContractError(RuntimeError):
    """An operation was used outside its contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._seq = next(_seq)
    t._op = op
    t._consumed = False
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias matching ``a``'s last axis."""
    if a.shape == b.shape:
        return _node("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _node("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def mask_mul(a: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (dropout, masking)."""
    m = np.asarray(m, dtype=DTYPE)
    if m.shape != a.shape:
        raise ShapeError(f"mask_mul: mask {m.shape} vs tensor {a.shape}")
    return _node("mask_mul", a.data * m, (a,), lambda g: (g * m,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    ad, bd = a.data, b.data
    return _node("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading axes: (..., m, k) x (..., k, n)."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm: leading axes disagree ({a.shape} x {b.shape})")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: inner dimensions differ ({a.shape} x {b.shape})")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _node("bmm", ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) applied over the last axis of an arbitrary-rank ``x``."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {shape}: {exc}") from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat of nothing")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def take(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0.  Also serves as the embedding lookup."""
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _node("take", a.data[idx], (a,), back)


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def add_constant(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or same-shape array)."""
    c = np.broadcast_to(np.asarray(c, dtype=DTYPE), a.shape)
    return _node("add_const", a.data + c, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, so finite differences behave."""
    x = a.data
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = k * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        return (g * d,)

    return _node("gelu", out, (a,), back)


def _masked_shift(x: np.ndarray, axis: int, mask):
    if mask is None:
        z = x
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax row with every entry masked out")
        z = np.where(mask, x, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    return z - zmax, zmax, mask


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction.  ``mask`` (True = keep) zeroes entries exactly."""
    shifted, _, mask = _masked_shift(a.data, axis, mask)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node("softmax", p, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted, _, _ = _masked_shift(a.data, axis, None)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node("log_softmax", out, (a,), back)


def logsumexp(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """log(sum(exp(x))) along ``axis``, restricted to entries where ``mask`` is True."""
    shifted, zmax, mask = _masked_shift(a.data, axis, mask)
    e = np.exp(shifted)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + zmax).squeeze(axis)
    p = e / s

    def back(g):
        return (np.expand_dims(g, axis) * p,)

    return _node("logsumexp", out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature size {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node("layer_norm", xhat * gd + bias.data, (x, gain, bias), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd**2).sum(axis=-1, keepdims=True) + eps)
    y = xd / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node("l2_normalize", y, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mask_mul(x, keep)


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer targets under softmax(logits).

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-row vector).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross_entropy: target outside [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = (np.log(s) + m).reshape(-1) - x[rows, t]
    p = e / s

    def grad_rows(w):
        d = p.copy()
        d[rows, t] -= 1.0
        return d * w

    if reduction == "none":
        return _node("cross_entropy", nll, (logits,), lambda g: (grad_rows(g[:, None]),))
    if reduction == "sum":
        return _node("cross_entropy", np.asarray(nll.sum()), (logits,), lambda g: (grad_rows(g),))
    if reduction == "mean":
        if n == 0:
            raise ContractError("cross_entropy mean over zero rows")
        return _node("cross_entropy", np.asarray(nll.mean()), (logits,), lambda g: (grad_rows(g / n),))
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate into whatever ``.grad`` already holds.  Any
    tensor in ``params`` that the sweep does not reach gets a zero grad.
    The graph is released afterwards; sweeping it again is an error.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._consumed:
            raise ContractError("graph segment was already consumed by an earlier backward")
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    if loss._backward is None:
        loss.grad = pending[id(loss)] + (0.0 if loss.grad is None else loss.grad)
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            elif parent.grad is None:
                parent.grad = np.array(pg, dtype=DTYPE).reshape(parent.shape)
            else:
                parent.grad = parent.grad + pg

    for node in nodes:
        node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
