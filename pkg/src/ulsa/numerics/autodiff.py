"""Reverse-mode automatic differentiation over float64 numpy buffers.

A `Node` wraps a C-contiguous float64 array plus the closure that routes its
output gradient to its parents. Graphs are rebuilt every step and swept by a
single topological backward pass that visits each node exactly once. Forward
values are checked finite on creation, so a NaN/Inf surfaces at the op that
produced it rather than three layers later.

A graph is confined to one thread for its lifetime; nodes without parents
(constants, detached values) are freely shareable read-only.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteValue, ShapeMismatch, UlsaError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no tape inside the context; forward values are unchanged."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("value", "parents", "grad", "requires_grad", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _asarray(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return arr


def constant(x) -> Node:
    return Node(_asarray(x))


def parameter(x) -> Node:
    """A leaf that accumulates gradients."""
    return Node(_asarray(x), requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward, op: str) -> Node:
    value = _asarray(value)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{op}: forward produced NaN/Inf")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward, True)
    return Node(value)


def _accum(p: Node, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    if g.shape != p.value.shape:
        raise ShapeMismatch("grad-accumulate", g.shape, p.value.shape)
    if p.grad is None:
        p.grad = np.array(g, dtype=np.float64)
    else:
        p.grad += g


def backward(root: Node) -> None:
    """Backpropagate from a scalar node through the recorded graph."""
    if root.value.size != 1:
        raise UlsaError(f"backward needs a scalar root, got shape {root.value.shape}")
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def detach(x: Node) -> Node:
    """Same value, no history: gradients stop here."""
    return Node(x.value)


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def back(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out, (a, b), back, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value

    def back(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out, (a, b), back, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def back(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out, (a, b), back, "mul")


def scale(a: Node, s: float) -> Node:
    out = a.value * s

    def back(g):
        _accum(a, g * s)

    return _make(out, (a,), back, "scale")


def relu(a: Node) -> Node:
    mask = a.value > 0

    def back(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), back, "relu")


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)  # non-positive inputs surface as NonFiniteValue

    def back(g):
        _accum(a, g / a.value)

    return _make(out, (a,), back, "log")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return _make(out, (a,), back, "sum")


def mean_(a: Node, axis=None, keepdims=False) -> Node:
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.value.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Node, shape) -> Node:
    out = a.value.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(out, (a,), back, "reshape")


def concat(nodes, axis: int) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            _accum(n, np.ascontiguousarray(piece))

    return _make(out, tuple(nodes), back, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch("matmul", a.value.shape, b.value.shape)
    out = a.value @ b.value

    def back(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(out, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# convolutional ops


def conv2d(x: Node, w: Node, bias: Node | None = None, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation, NCHW layout, zero padding.

    x: (B, C, H, W); w: (F, C, kh, kw); bias: (F,) or None.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeMismatch("conv2d", xv.shape, wv.shape)
    B, C, H, W = xv.shape
    F, _, kh, kw = wv.shape
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeMismatch("conv2d(kernel larger than padded input)", xv.shape, wv.shape)
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wf = wv.reshape(F, C * kh * kw)
    out = (cols @ wf.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.value[None, :, None, None]

    def back(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, F)
        _accum(w, (gf.T @ cols).reshape(F, C, kh, kw))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gf @ wf).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            Hp, Wp = H + 2 * pad, W + 2 * pad
            dxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ]
            _accum(x, dxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else dxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back, "conv2d")


def max_pool2d(x: Node, kernel: int = 2, stride: int | None = None) -> Node:
    if x.value.ndim != 4:
        raise ShapeMismatch("max_pool2d(expects 4-D)", x.value.shape)
    s = kernel if stride is None else stride
    B, C, H, W = x.value.shape
    win = sliding_window_view(x.value, (kernel, kernel), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        onehot = onehot.reshape(B, C, Ho, Wo, kernel, kernel)
        dx = np.zeros((B, C, H, W))
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += onehot[:, :, :, :, i, j]
        _accum(x, dx)

    return _make(np.ascontiguousarray(out), (x,), back, "max_pool2d")


def upsample_nearest(x: Node, factor: int = 2) -> Node:
    if x.value.ndim != 4:
        raise ShapeMismatch("upsample_nearest(expects 4-D)", x.value.shape)
    out = x.value.repeat(factor, axis=2).repeat(factor, axis=3)
    B, C, H, W = x.value.shape

    def back(g):
        _accum(x, g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)))

    return _make(out, (x,), back, "upsample_nearest")


def instance_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Per-sample, per-channel normalization over the spatial axes.

    Statistics never cross the batch axis, so detached and live branches of
    the same step stay independent of batch composition.
    """
    if x.value.ndim != 4:
        raise ShapeMismatch("instance_norm(expects 4-D)", x.value.shape)
    B, C, H, W = x.value.shape
    if gamma.value.shape != (C,) or beta.value.shape != (C,):
        raise ShapeMismatch("instance_norm(affine)", gamma.value.shape, (C,))
    mu = x.value.mean(axis=(2, 3), keepdims=True)
    var = x.value.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x.value - mu) * inv
    out = gamma.value[None, :, None, None] * xh + beta.value[None, :, None, None]

    def back(g):
        _accum(gamma, (g * xh).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = g * gamma.value[None, :, None, None]
            m1 = dxh.mean(axis=(2, 3), keepdims=True)
            m2 = (dxh * xh).mean(axis=(2, 3), keepdims=True)
            _accum(x, inv * (dxh - m1 - xh * m2))

    return _make(out, (x, gamma, beta), back, "instance_norm")


def adaptive_avg_pool(x: Node) -> Node:
    """Global spatial mean: (B, C, H, W) -> (B, C); backward spreads g / (H*W)."""
    if x.value.ndim != 4:
        raise ShapeMismatch("adaptive_avg_pool(expects 4-D)", x.value.shape)
    B, C, H, W = x.value.shape
    out = x.value.mean(axis=(2, 3))

    def back(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.value.shape).copy())

    return _make(out, (x,), back, "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Node, axis: int = -1) -> Node:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), back, "softmax")


def log_softmax(x: Node, axis: int = -1) -> Node:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), back, "log_softmax")


def cosine_similarity(a: Node, b: Node, floor: float = 1e-12) -> Node:
    """Row-wise cosine similarity for (B, C) inputs; norms floored at `floor`."""
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape or a.value.ndim != 2:
        raise ShapeMismatch("cosine_similarity", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    dot = (av * bv).sum(axis=1)
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    naf = np.maximum(na, floor)
    nbf = np.maximum(nb, floor)
    out = dot / (naf * nbf)

    def back(g):
        ga = g[:, None] * (
            bv / (naf * nbf)[:, None]
            - (na > floor)[:, None] * (dot / (naf**2 * nbf))[:, None] * (av / naf[:, None])
        )
        gb = g[:, None] * (
            av / (naf * nbf)[:, None]
            - (nb > floor)[:, None] * (dot / (nbf**2 * naf))[:, None] * (bv / nbf[:, None])
        )
        _accum(a, ga)
        _accum(b, gb)

    return _make(out, (a, b), back, "cosine_similarity")
