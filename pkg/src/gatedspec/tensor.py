"""Small reverse-mode autodiff over numpy float32 arrays.

Storage is float32. Reductions (matmul, softmax, layernorm statistics) are
accumulated in float64 and rounded back on output, so a row's result does not
depend on which other rows share the batch or on how many masked-out zeros
sit in a softmax row.  That property is what lets a batched tree forward and
an incremental forward produce the same bits.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class _Mode(threading.local):
    """Grad recording and storage dtype, per thread."""

    def __init__(self):
        self.grad = True
        self.dtype = np.float32


_mode = _Mode()


def dtype():
    return _mode.dtype


@contextlib.contextmanager
def _set(**values):
    prev = {k: getattr(_mode, k) for k in values}
    for k, v in values.items():
        setattr(_mode, k, v)
    try:
        yield
    finally:
        for k, v in prev.items():
            setattr(_mode, k, v)


def no_grad():
    return _set(grad=False)


def precision(dt):
    """Temporarily change the storage dtype (float64 is used by gradient checks)."""
    return _set(dtype=np.dtype(dt).type)


def current_mode() -> dict:
    return {"grad": _mode.grad, "dtype": _mode.dtype}


def use_mode(mode: dict):
    """Apply a mode captured with :func:`current_mode`, e.g. inside a worker thread."""
    return _set(**mode)


def make_rng(seed: int) -> np.random.Generator:
    """All randomness in the package flows from numpy's PCG64 generator."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        arr = np.asarray(data)
        if arr.dtype != _mode.dtype:
            arr = arr.astype(_mode.dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = _parents
        self._backward: Callable | None = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Nodes are processed once each in reverse topological order.
        """
        order = _topo(self)
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return order


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _mode.grad and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a[..., m, k] and b[k, n] or b[..., k, n] with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data, dtype=np.float64)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data if a.data.ndim > 1 else a.data[None]
            g2 = g if g.ndim > 1 else g[None]
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data.astype(np.float64)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))  # overflow-free sigmoid

    def backward(g):
        return ((g * (sig * (1.0 + xd * (1.0 - sig))))).astype(x.data.dtype),

    return _result(xd * sig, (x,), backward, "silu")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) zeroes excluded entries exactly."""
    x = _as_tensor(x)
    xd = x.data.astype(np.float64)
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    xd = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(xd)
    p64 = e / e.sum(axis=-1, keepdims=True)
    out = _result(p64, (x,), None, "softmax")
    if out.requires_grad:
        p = out.data

        def backward(g):
            return p * (g - (g * p).sum(axis=-1, keepdims=True)),

        out._backward = backward
    return out


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64)
    xd = xd - xd.max(axis=-1, keepdims=True)
    return xd - np.log(np.exp(xd).sum(axis=-1, keepdims=True))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        g64 = g.astype(np.float64)
        gg = _unbroadcast(g64 * xhat, gain.data.shape).astype(g.dtype)
        gb = _unbroadcast(g64, bias.data.shape).astype(g.dtype)
        gx = g64 * gain.data
        gx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        return gx.astype(g.dtype), gg, gb

    return _result(out, (x, gain, bias), backward, "layernorm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return gt,

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy (nats) over rows of ``logits[..., V]``."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.data.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if t.size != flat.shape[0]:
        raise ValueError("targets do not match logits rows")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    lsm = log_softmax_np(flat)
    rows = np.arange(t.size)
    loss = -lsm[rows, t].mean() if t.size else 0.0

    def backward(g):
        p = np.exp(lsm)
        p[rows, t] -= 1.0
        return (p * (g / max(t.size, 1))).reshape(logits.data.shape).astype(logits.data.dtype),

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return gx,

    return _result(x.data[idx], (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = np.cumsum([t.data.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(dtype=np.float64)), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),), "sum")


# ---------------------------------------------------------------- optimizer


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict, lr: float,
              betas=(0.9, 0.999), eps=1e-8) -> None:
    """One bias-corrected Adam update, in place. ``state`` holds step count and moments."""
    b1, b2 = betas
    t = state["t"] = state.get("t", 0) + 1
    m_all = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    v_all = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, m_all, v_all):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 4e-4, betas=(0.9, 0.999), eps=1e-8,
                 grad_clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        grads = [p.grad for p in self.params]
        if self.grad_clip:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
            if total > self.grad_clip:
                grads = [None if g is None else g * (self.grad_clip / total) for g in grads]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas, self.eps)
