"""Differentiable kernels.

Every kernel computes its forward value with numpy and records a closure
returning one gradient per parent (``None`` for parents that take no
gradient). Elementwise binary ops require identical shapes; the only
broadcast is :func:`bias`, which adds an array matching the trailing dims.
Reductions accumulate in float64.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .engine import Graph, Node, ShapeError, as_node

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _graph(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one argument must be a Node")


def _same_shape(g: Graph, op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(g.next_id, op, f"shape mismatch {a.shape} vs {b.shape}")


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Node:
    g = _graph(a, b)
    a, b = as_node(g, a), as_node(g, b)
    _same_shape(g, "add", a, b)
    return g._record("add", a.value + b.value, (a, b), lambda gy: (gy, gy))


def sub(a, b) -> Node:
    g = _graph(a, b)
    a, b = as_node(g, a), as_node(g, b)
    _same_shape(g, "sub", a, b)
    return g._record("sub", a.value - b.value, (a, b), lambda gy: (gy, -gy))


def mul(a, b) -> Node:
    g = _graph(a, b)
    a, b = as_node(g, a), as_node(g, b)
    _same_shape(g, "mul", a, b)
    av, bv = a.value, b.value
    return g._record("mul", av * bv, (a, b), lambda gy: (gy * bv, gy * av))


def scale(a: Node, c: float) -> Node:
    return a.graph._record("scale", a.value * c, (a,), lambda gy: (gy * c,))


def stop_gradient(a: Node) -> Node:
    """Identity in the forward pass; blocks all upstream gradient."""
    return a.graph._record("stop_gradient", a.value.copy(), (a,), lambda gy: (None,))


# -- affine ------------------------------------------------------------------------

def linear(x: Node, w: Node) -> Node:
    """``x @ w`` over the last axis of ``x``; ``w`` is (in, out)."""
    g = x.graph
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(g.next_id, "linear", f"cannot apply {w.shape} to {x.shape}")
    xv, wv = x.value, w.value
    y = xv @ wv

    def back(gy):
        gx = gy @ wv.T
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        gw = x2.T @ g2
        return gx, gw

    return g._record("linear", y, (x, w), back)


def bias(x: Node, b: Node) -> Node:
    """Adds ``b`` to ``x``; ``b.shape`` must equal the trailing dims of ``x``."""
    g = x.graph
    b = as_node(g, b)
    nb = b.ndim
    if nb > x.ndim or x.shape[x.ndim - nb:] != b.shape:
        raise ShapeError(g.next_id, "bias", f"bias {b.shape} does not match {x.shape}")
    lead = tuple(range(x.ndim - nb))

    def back(gy):
        gb = gy.sum(axis=lead, dtype=np.float64).astype(gy.dtype) if lead else gy
        return gy, gb

    return g._record("bias", x.value + b.value, (x, b), back)


# -- activations ---------------------------------------------------------------------

def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph._record("relu", x.value * mask, (x,), lambda gy: (gy * mask,))


def gelu(x: Node) -> Node:
    xv = x.value
    x2 = xv * xv
    inner = _SQRT_2_OVER_PI * (xv + 0.044715 * x2 * xv)
    t = np.tanh(inner)
    y = 0.5 * xv * (1.0 + t)

    def back(gy):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        return (gy * dy,)

    return x.graph._record("gelu", y, (x,), back)


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return x.graph._record("tanh", t, (x,), lambda gy: (gy * (1.0 - t * t),))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return x.graph._record("exp", y, (x,), lambda gy: (gy * y,))


def log(x: Node) -> Node:
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xv)
    return x.graph._record("log", y, (x,), lambda gy: (gy / xv,))


def clamp(x: Node, lo: float, hi: float) -> Node:
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return x.graph._record("clamp", np.clip(xv, lo, hi), (x,), lambda gy: (gy * inside,))


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    g = x.graph
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(g.next_id, "layer_norm", f"affine params must be ({d},)")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xv.dtype)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xv.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv, bv = gamma.value, beta.value
    y = xhat * gv + bv
    lead = tuple(range(x.ndim - 1))

    def back(gy):
        gxhat = gy * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (gy * xhat).sum(axis=lead, dtype=np.float64).astype(gy.dtype)
        gbeta = gy.sum(axis=lead, dtype=np.float64).astype(gy.dtype)
        return gx, ggamma, gbeta

    return g._record("layer_norm", y, (x, gamma, beta), back)


def softmax(x: Node, axis: int = -1) -> Node:
    xv = x.value
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(gy):
        return (y * (gy - (gy * y).sum(axis=axis, keepdims=True)),)

    return x.graph._record("softmax", y, (x,), back)


def log_softmax(x: Node, axis: int = -1) -> Node:
    xv = x.value
    m = xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(xv - m).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(xv.dtype) + m
    y = xv - lse
    p = np.exp(y)

    def back(gy):
        return (gy - p * gy.sum(axis=axis, keepdims=True),)

    return x.graph._record("log_softmax", y, (x,), back)


# -- structural ----------------------------------------------------------------------

def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    g = _graph(*xs)
    xs = [as_node(g, x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(g.next_id, "concat", f"incompatible shapes {[x.shape for x in xs]}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([x.value for x in xs], axis=ax)

    def back(gy):
        return tuple(np.split(gy, splits, axis=ax))

    return g._record("concat", y, tuple(xs), back)


def slice_(x: Node, index) -> Node:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    y = x.value[index]
    shape, dtype = x.shape, x.value.dtype

    def back(gy):
        gx = np.zeros(shape, dtype=dtype)
        gx[index] = gy
        return (gx,)

    return x.graph._record("slice", np.ascontiguousarray(y), (x,), back)


def take(x: Node, indices: np.ndarray, axis: int = 0) -> Node:
    """Integer gather along one axis (embedding lookup)."""
    indices = np.asarray(indices)
    y = np.take(x.value, indices, axis=axis)
    shape, dtype = x.shape, x.value.dtype

    def back(gy):
        gx = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(gx, axis, 0)
        gmoved = np.moveaxis(gy, list(range(axis, axis + indices.ndim)),
                             list(range(indices.ndim)))
        np.add.at(moved, indices, gmoved)
        return (gx,)

    return x.graph._record("take", y, (x,), back)


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    g = x.graph
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(g.next_id, "reshape", str(exc)) from None
    src = x.shape
    return g._record("reshape", y, (x,), lambda gy: (gy.reshape(src),))


def transpose(x: Node, axes: tuple[int, ...]) -> Node:
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.value.transpose(axes))
    return x.graph._record("transpose", y, (x,), lambda gy: (gy.transpose(inv),))


def expand(x: Node, axis: int, n: int) -> Node:
    """Insert a new axis of length ``n`` by repetition."""
    y = np.repeat(np.expand_dims(x.value, axis), n, axis=axis)

    def back(gy):
        return (gy.sum(axis=axis, dtype=np.float64).astype(gy.dtype),)

    return x.graph._record("expand", y, (x,), back)


def sum_(x: Node, axis=None) -> Node:
    y = np.asarray(x.value.sum(axis=axis, dtype=np.float64))
    shape = x.shape

    def back(gy):
        if axis is None:
            return (np.broadcast_to(gy, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(gy, axis), shape).copy(),)

    return x.graph._record("sum", y, (x,), back)


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# -- attention -----------------------------------------------------------------------

def attention(q: Node, k: Node, v: Node, mask: np.ndarray | None = None) -> Node:
    """Scaled dot-product attention over (..., T, d) arrays.

    ``mask`` is boolean (..., Tq, Tk) or broadcastable; False entries are excluded.
    """
    g = q.graph
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(g.next_id, "attention", f"q {q.shape} k {k.shape} v {v.shape}")
    d = q.shape[-1]
    s = 1.0 / math.sqrt(d)
    qv, kv, vv = q.value, k.value, v.value
    scores = (qv @ np.swapaxes(kv, -1, -2)) * s
    if mask is not None:
        scores = np.where(mask, scores, -1e30).astype(scores.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    y = p @ vv

    def back(gy):
        gv = np.swapaxes(p, -1, -2) @ gy
        gp = gy @ np.swapaxes(vv, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= s
        gq = gs @ kv
        gk = np.swapaxes(gs, -1, -2) @ qv
        return gq, gk, gv

    return g._record("attention", y, (q, k, v), back)


# -- stochastic reparameterizations (noise supplied by caller) ----------------------

def gaussian_reparameterize(mu: Node, logvar: Node, eps: np.ndarray) -> Node:
    """``mu + exp(logvar / 2) * eps`` with fixed standard-normal noise ``eps``."""
    g = mu.graph
    if mu.shape != logvar.shape or mu.shape != np.shape(eps):
        raise ShapeError(g.next_id, "gaussian_reparameterize",
                         f"mu {mu.shape} logvar {logvar.shape} eps {np.shape(eps)}")
    std = np.exp(0.5 * logvar.value)
    ev = np.asarray(eps, dtype=mu.value.dtype)
    return g._record("gaussian_reparameterize", mu.value + std * ev, (mu, logvar),
                     lambda gy: (gy, gy * ev * std * 0.5))


def gumbel_softmax(logits: Node, gumbel: np.ndarray, tau: float) -> Node:
    """Relaxed one-hot ``softmax((logits + gumbel) / tau)`` with fixed Gumbel noise."""
    g = logits.graph
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if logits.shape != np.shape(gumbel):
        raise ShapeError(g.next_id, "gumbel_softmax", f"{logits.shape} vs {np.shape(gumbel)}")
    z = (logits.value + np.asarray(gumbel, dtype=logits.value.dtype)) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)

    def back(gy):
        return (w * (gy - (gy * w).sum(axis=-1, keepdims=True)) / tau,)

    return g._record("gumbel_softmax", w, (logits,), back)


# -- losses (per-row; reduce with sum_/mean) ---------------------------------------

def cross_entropy(logits: Node, target: np.ndarray | Node, axis: int = -1) -> Node:
    """``-sum(target * log_softmax(logits))`` along ``axis``; target is a distribution."""
    g = logits.graph
    t = target.value if isinstance(target, Node) else np.asarray(target, dtype=logits.value.dtype)
    if t.shape != logits.shape:
        raise ShapeError(g.next_id, "cross_entropy", f"target {t.shape} vs logits {logits.shape}")
    xv = logits.value
    m = xv.max(axis=axis, keepdims=True)
    e = np.exp(xv - m)
    z = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    logp = xv - (np.log(z).astype(xv.dtype) + m)
    p = e / z.astype(xv.dtype)
    y = -(t * logp).sum(axis=axis, dtype=np.float64)
    tsum = t.sum(axis=axis, keepdims=True)

    def back(gy):
        gy = np.expand_dims(gy, axis)
        return (gy * (p * tsum - t),)

    return g._record("cross_entropy", y, (logits,), back)


def bce_logits(logits: Node, target: np.ndarray) -> Node:
    """Elementwise binary cross-entropy on logits."""
    xv = logits.value
    t = np.asarray(target, dtype=xv.dtype)
    y = np.maximum(xv, 0) - xv * t + np.log1p(np.exp(-np.abs(xv)))
    sig = 1.0 / (1.0 + np.exp(-xv))
    return logits.graph._record("bce_logits", y, (logits,), lambda gy: (gy * (sig - t),))


def squared_error(a: Node, b) -> Node:
    """Sum over the last axis of ``(a - b) ** 2``."""
    g = a.graph
    b = as_node(g, b)
    _same_shape(g, "squared_error", a, b)
    diff = a.value - b.value
    y = (diff.astype(np.float64) ** 2).sum(axis=-1)

    def back(gy):
        gd = 2.0 * diff * gy[..., None]
        return gd, -gd

    return g._record("squared_error", y, (a, b), back)


def kl_diag_gaussian(mu_q: Node, logvar_q: Node, mu_p, logvar_p) -> Node:
    """KL(N(mu_q, e^logvar_q) || N(mu_p, e^logvar_p)) summed over the last axis."""
    g = mu_q.graph
    mu_p, logvar_p = as_node(g, mu_p), as_node(g, logvar_p)
    for other in (logvar_q, mu_p, logvar_p):
        _same_shape(g, "kl_diag_gaussian", mu_q, other)
    mq, lq, mp, lp = mu_q.value, logvar_q.value, mu_p.value, logvar_p.value
    vq = np.exp(lq)
    ivp = np.exp(-lp)
    d = mq - mp
    terms = 0.5 * (lp - lq + (vq + d * d) * ivp - 1.0)
    y = terms.astype(np.float64).sum(axis=-1)

    def back(gy):
        gy = gy[..., None]
        gmq = gy * d * ivp
        glq = gy * 0.5 * (vq * ivp - 1.0)
        glp = gy * 0.5 * (1.0 - (vq + d * d) * ivp)
        return gmq, glq, -gmq, glp

    return g._record("kl_diag_gaussian", y, (mu_q, logvar_q, mu_p, logvar_p), back)


def kl_categorical(log_q: Node, log_p) -> Node:
    """KL(q || p) from log-probabilities, summed over the last axis."""
    g = log_q.graph
    log_p = as_node(g, log_p)
    _same_shape(g, "kl_categorical", log_q, log_p)
    lq, lp = log_q.value, log_p.value
    q = np.exp(lq)
    diff = lq - lp
    y = (q * diff).astype(np.float64).sum(axis=-1)

    def back(gy):
        gy = gy[..., None]
        return gy * q * (diff + 1.0), -gy * q

    return g._record("kl_categorical", y, (log_q, log_p), back)
