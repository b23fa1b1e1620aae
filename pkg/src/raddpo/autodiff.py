"""Define-by-run reverse-mode autodiff over numpy float64 arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients while it is active.  ``backward`` walks the recorded nodes in
reverse order and returns a :class:`Gradients` map.  Nothing is cached
between tapes; build a fresh one per step.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape():
    ...     y = x * x
    ...     g = backward(y)
    >>> float(g[x])
    6.0
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Ordered record of primitive ops; confined to the thread that opened it."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def _add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def node_of(self, t: "Tensor") -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            # leaf seen for the first time on this tape
            t._tape = self
            t._node = self._add(Node("leaf", (), None, t.data.shape))
            return t._node
        return None


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node_id(self) -> int | None:
        tape = active_tape()
        return self._node if tape is not None and self._tape is tape else None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def record(op_kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` as a tensor and, if any input is tracked, log it on the tape.

    ``backward_fn(g)`` must return one gradient (or ``None``) per input.
    """
    tape = active_tape()
    result = Tensor(out)
    if tape is None:
        return result
    parents = tuple(tape.node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return result
    result._tape = tape
    result._node = tape._add(Node(op_kind, tuple(-1 if p is None else p for p in parents),
                                  backward_fn, out.shape))
    return result


@dataclass
class Gradients:
    tape: Tape
    grads: dict[int, np.ndarray]

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t._tape is self.tape and t._node in self.grads:
            return self.grads[t._node]
        return np.zeros(t.shape)

    def get(self, t: Tensor) -> np.ndarray:
        return self[t]


def backward(loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``loss``.  Unreachable tensors get zeros."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not recorded on any tape")
    grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape)}
    for i in range(loss._node, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.backward_fn is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if p < 0 or pg is None:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return Gradients(tape, grads)


# ----------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa != sb:
        np.broadcast_shapes(sa, sb)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa != sb:
        np.broadcast_shapes(sa, sb)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("pow", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("log", (a,), np.log(ad), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record("gelu", (a,), out, bwd)


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return record("log_sigmoid", (a,), out, lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-sided form avoids overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def stop_gradient(t: Tensor) -> Tensor:
    """Same values as ``t``; nothing flows back through this edge."""
    return Tensor(as_tensor(t).data)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``mask`` else from ``b``; the mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)
    return record("where", (a, b), out,
                  lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                             _unbroadcast(np.where(mask, 0.0, g), sb)))


# ----------------------------------------------------------------------------
# reductions and shape ops

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes=()) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record("getitem", (a,), a.data[idx], bwd)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return record("concat", ts, np.concatenate([t.data for t in ts], axis=axis),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    return record("stack", ts, np.stack([t.data for t in ts], axis=axis),
                  lambda g: tuple(np.moveaxis(g, axis, 0)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids are integer constants."""
    ids = np.asarray(ids)
    V = table.shape[0]

    def bwd(g):
        flat = g.reshape(-1, g.shape[-1])
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), flat)
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    return record("embedding", (table,), table.data[ids], bwd)


def take_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[..., idx]`` along the last axis, one index per leading position."""
    idx = np.asarray(idx)[..., None]
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return record("take_last", (a,), np.take_along_axis(a.data, idx, axis=-1)[..., 0], bwd)


# ----------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold the leading axes into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (_unbroadcast(ga, ad.shape), gb)

    return record("matmul", (a, b), ad @ bd, bwd)


# ----------------------------------------------------------------------------
# normalizers (max-subtracted)

def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    p = np.exp(x - out_k)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return record("logsumexp", (a,), out, bwd)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    p = np.exp(out)
    return record("log_softmax", (a,), out,
                  lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (a,), p,
                  lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def masked_softmax(a, visible: np.ndarray, axis=-1) -> Tensor:
    """Softmax where hidden entries get exactly zero weight.

    Every slice along ``axis`` needs at least one visible entry.
    """
    a = as_tensor(a)
    x = np.where(visible, a.data, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return record("masked_softmax", (a,), p,
                  lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def bwd(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gain, bias), xhat * gd + bias.data, bwd)
