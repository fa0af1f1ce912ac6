"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor records its parents and a vector-Jacobian closure; backward() walks
the tape in reverse topological order. Gradients are only computed along
branches that reach a leaf with requires_grad set, so frozen parameters cost
nothing in the backward pass and never receive a gradient.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None, requires_grad=None):
        self.data = data
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def unfreeze(self):
        self.trainable = True
        self.requires_grad = True


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable requires_grad leaf."""
    if not loss._parents and loss._vjp is None:
        raise RuntimeError("backward before forward: no computation recorded on this tensor")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        if node is not loss:
            node.grad = None


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def mul(a, b) -> Tensor:
    if np.isscalar(b) and not isinstance(b, Tensor):
        a = as_tensor(a)
        s = b

        def vjp_scalar(g):
            return (g * s if a.requires_grad else None,)

        return Tensor(a.data * s, parents=(a,), vjp=vjp_scalar)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def neg(a) -> Tensor:
    return mul(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    assert a.data.ndim >= 2 and b.data.ndim >= 2, "matmul operands must be at least 2-D"
    out_data = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp)


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old) if a.requires_grad else None,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, axis1, axis2)

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2) if a.requires_grad else None,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def select_token(a, index: int) -> Tensor:
    """Pick position ``index`` along axis 1 of a (B, T, ...) tensor."""
    a = as_tensor(a)
    out_data = a.data[:, index]

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(a.data)
        ga[:, index] = g
        return (ga,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def rows(a, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0 with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index)
    out_data = a.data[index]

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[start:stop]

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def embedding(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def vjp(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return Tensor(out_data, parents=(table,), vjp=vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0) if a.requires_grad else None,)

    return Tensor(out_data, parents=(a,), vjp=vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - t**2) if a.requires_grad else None,)

    return Tensor(t, parents=(a,), vjp=vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * s * (1.0 - s) if a.requires_grad else None,)

    return Tensor(s, parents=(a,), vjp=vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor(s, parents=(a,), vjp=vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return Tensor(out_data, parents=(x, gamma, beta), vjp=vjp)


# ---------------------------------------------------------------------------
# losses


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = m + np.log(se)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * (e / se),)

    return Tensor(out, parents=(a,), vjp=vjp)


def cross_entropy(logits, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of (N, V) logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    assert n > 0, "cross_entropy over an empty batch"
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).reshape(-1)
    picked = logits.data[np.arange(n), labels]
    losses = lse - picked
    out_data = losses.mean() if reduction == "mean" else losses.sum()

    def vjp(g):
        if not logits.requires_grad:
            return (None,)
        p = e / se
        p[np.arange(n), labels] -= 1.0
        scale = g / n if reduction == "mean" else g
        return (p * scale,)

    return Tensor(np.asarray(out_data), parents=(logits,), vjp=vjp)


def bce_with_logits(scores, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Numerically stable binary cross-entropy of sigmoid(scores)."""
    scores = as_tensor(scores)
    targets = np.asarray(targets, dtype=scores.data.dtype)
    x = scores.data
    losses = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    n = x.shape[0]
    out_data = losses.mean() if reduction == "mean" else losses.sum()

    def vjp(g):
        if not scores.requires_grad:
            return (None,)
        s = 1.0 / (1.0 + np.exp(-x))
        scale = g / n if reduction == "mean" else g
        return ((s - targets) * scale,)

    return Tensor(np.asarray(out_data), parents=(scores,), vjp=vjp)
