"""Minimal reverse-mode differentiation over the decoder's operator set.

Values are numpy arrays. Matrix ops act on the last two axes and broadcast
over leading (batch) axes, so a 2-D parameter can meet a stack of images;
gradients are summed back to the parameter's own shape.
"""

from __future__ import annotations

import numpy as np

from .errors import CycleDetected, LabelOutOfRange, ShapeMismatch, UnsupportedOp


class Node:
    __slots__ = ("value", "parents", "backward", "op", "name")

    def __init__(self, value, parents=(), backward=None, op="leaf", name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward = backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}, name={self.name})"


def leaf(value, name=None):
    return Node(np.array(value, dtype=np.float64), name=name)


def constant(value):
    return Node(value, op="const")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    def back(g):
        return (
            _unbroadcast(g @ _swap(b.value), a.shape),
            _unbroadcast(_swap(a.value) @ g, b.shape),
        )

    return Node(a.value @ b.value, (a, b), back, "matmul")


def transpose(a):
    return Node(_swap(a.value), (a,), lambda g: (_swap(g),), "transpose")


def add(a, b):
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), back, "add")


def sub(a, b):
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), back, "sub")


def scale(a, c):
    """Multiply by a Python float."""
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul_scalar(a, s):
    """Multiply by a scalar node (e.g. a learnable step size)."""
    if s.value.size != 1:
        raise ShapeMismatch("mul_scalar expects a scalar node")

    def back(g):
        return g * s.value, np.sum(g * a.value).reshape(s.shape)

    return Node(a.value * s.value, (a, s), back, "mul_scalar")


def softmax_cols(a):
    x = a.value
    e = np.exp(x - x.max(axis=-2, keepdims=True))
    y = e / e.sum(axis=-2, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-2, keepdims=True)),)

    return Node(y, (a,), back, "softmax")


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-column normalization over axis -2; ``gain``/``bias`` have shape (D,)."""
    x = a.value
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    s = np.sqrt((xc * xc).mean(axis=-2, keepdims=True) + eps)
    xhat = xc / s
    gcol = gain.value[:, None]
    out = gcol * xhat + bias.value[:, None]

    def back(g):
        dxhat = g * gcol
        dx = (
            dxhat
            - dxhat.mean(axis=-2, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-2, keepdims=True)
        ) / s
        red = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        dgain = np.sum(g * xhat, axis=red)
        dbias = np.sum(g, axis=red)
        return dx, dgain, dbias

    return Node(out, (a, gain, bias), back, "layer_norm")


def concat(a, b):
    """Concatenate along the last axis, broadcasting leading axes."""
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    av = np.broadcast_to(a.value, lead + a.shape[-1:])
    bv = np.broadcast_to(b.value, lead + b.shape[-1:])
    n = a.shape[-1]

    def back(g):
        return _unbroadcast(g[..., :n], a.shape), _unbroadcast(g[..., n:], b.shape)

    return Node(np.concatenate([av, bv], axis=-1), (a, b), back, "concat")


def columns(a, start, stop):
    """Slice ``a[..., start:stop]`` (also used to split heads out of P)."""

    def back(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return Node(a.value[..., start:stop], (a,), back, "columns")


def half_sq_norm(a):
    return Node(0.5 * np.sum(a.value**2), (a,), lambda g: (g * a.value,), "half_sq_norm")


def cross_entropy(logits, labels):
    """Mean over patches of -log softmax(column)[label]; logits are (..., C, N)."""
    x = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    C = x.shape[-2]
    if labels.shape != x.shape[:-2] + x.shape[-1:]:
        raise ShapeMismatch(f"labels shape {labels.shape} does not fit logits {x.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    m = x.max(axis=-2, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-2, keepdims=True)) + m
    logp = x - lse
    onehot = np.moveaxis(np.eye(C)[labels], -1, -2)
    count = labels.size
    loss = -np.sum(onehot * logp) / count

    def back(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return Node(loss, (logits,), back, "cross_entropy")


def topological_order(root):
    """Nodes reachable from ``root``, parents before children."""
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise CycleDetected(f"cycle through {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in reversed(node.parents):
            if state.get(id(p)) == 1:
                raise CycleDetected(f"cycle through {p!r}")
            if state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def backward(root):
    """Adjoints of every node reachable from a scalar ``root``, keyed by id."""
    if root.value.size != 1:
        raise ShapeMismatch("root must be a scalar")
    order = topological_order(root)
    adj = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or not node.parents:
            continue
        if node.backward is None:
            raise UnsupportedOp(f"no backward rule for op {node.op!r}")
        for p, gp in zip(node.parents, node.backward(g)):
            k = id(p)
            adj[k] = adj[k] + gp if k in adj else gp
    return adj


def value_and_grad(root, params):
    """(loss, [gradient for each leaf in params])."""
    adj = backward(root)
    grads = [adj.get(id(p), np.zeros_like(p.value)) for p in params]
    return float(root.value), grads
