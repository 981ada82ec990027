"""Differentiable operations over :class:`~sessrec.ndgrad.tensor.Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_result

PROB_CLAMP = 1e-7
MASK_FILL = -1e9
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), grad_fn)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, grad_fn)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select entries of ``x`` along ``axis`` (numpy ``take`` with a 1-D index)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"index out of range for axis {axis} of size {x.shape[axis]}")
    out = np.take(x.data, idx, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_result(out, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` for integer ``ids`` of any shape; output ``ids.shape + (D,)``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding id out of range [0, {vocab})")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return make_result(out, (table,), grad_fn)


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Average ``x[..., N, D]`` over N, skipping positions where ``mask`` is True.

    Rows with every position masked pool to zeros.
    """
    if x.ndim < 2:
        raise DimensionError("mean_pool needs at least [N, D]")
    keep = np.ones(x.shape[:-1], dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {keep.shape} does not match {x.shape[:-1]}")
    count = np.maximum(keep.sum(axis=-1, keepdims=True), 1)
    weights = (keep / count).astype(x.dtype)[..., None]
    out = (x.data * weights).sum(axis=-2)

    def grad_fn(g):
        return (g[..., None, :] * weights,)

    return make_result(out, (x,), grad_fn)


# -- nonlinearities -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return make_result(out, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return make_result(out, (x, gain, bias), grad_fn)


# -- losses -------------------------------------------------------------------

def bce_elementwise(p: Tensor, target, clamp: float = PROB_CLAMP) -> Tensor:
    """Binary cross entropy of probabilities ``p`` against 0/1 ``target``.

    Probabilities are clamped to ``[clamp, 1 - clamp]``; the gradient is zero
    where clamping is active.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if y.shape != p.shape:
        raise DimensionError(f"bce target shape {y.shape} != prediction shape {p.shape}")
    lo, hi = p.dtype.type(clamp), p.dtype.type(1.0 - clamp)
    q = np.clip(p.data, lo, hi)
    out = -(y * np.log(q) + (1.0 - y) * np.log1p(-q))

    def grad_fn(g):
        inside = (p.data >= lo) & (p.data <= hi)
        return (g * (-y / q + (1.0 - y) / (1.0 - q)) * inside,)

    return make_result(out, (p,), grad_fn)


def cross_entropy_row(probs: Tensor, labels, clamp: float = PROB_CLAMP) -> Tensor:
    """``-log probs[..., label]`` per row of a probability matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != probs.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} != rows {probs.shape[:-1]}")
    c = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError(f"label out of range [0, {c})")
    picked = np.take_along_axis(probs.data, labels[..., None], axis=-1)[..., 0]
    lo = probs.dtype.type(clamp)
    q = np.clip(picked, lo, 1.0)
    out = -np.log(q)

    def grad_fn(g):
        full = np.zeros_like(probs.data)
        local = np.where(picked >= lo, -g / q, 0.0).astype(probs.dtype)
        np.put_along_axis(full, labels[..., None], local[..., None], axis=-1)
        return (full,)

    return make_result(out, (probs,), grad_fn)


# -- attention ----------------------------------------------------------------

def multi_head_self_attention(
    x: Tensor, params: Mapping[str, Tensor], mask=None, heads: int = 1
) -> Tensor:
    """Scaled dot-product self attention over ``x[..., N, D]``.

    ``params`` holds ``wq, bq, wk, bk, wv, bv`` (``D -> heads*d_qkv``) and
    ``wo, bo`` (``heads*d_qkv -> D``). ``mask`` is True on padding tokens:
    those keys get no attention weight and those rows output zeros.
    """
    if x.ndim < 2:
        raise DimensionError("attention input must be at least [N, D]")
    *lead, n, d_model = x.shape
    width = params["wq"].shape[-1]
    if params["wq"].shape[0] != d_model or width % heads:
        raise DimensionError(
            f"cannot split projection {params['wq'].shape} into {heads} heads over D={d_model}"
        )
    if params["wo"].shape != (width, d_model):
        raise DimensionError(f"output projection must be ({width}, {d_model})")
    d_qkv = width // heads
    nl = len(lead)
    split = tuple(lead) + (n, heads, d_qkv)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def project(w, b):
        return transpose(reshape(add(matmul(x, params[w]), params[b]), split), to_heads)

    q, k, v = project("wq", "bq"), project("wk", "bk"), project("wv", "bv")
    k_t = transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = mul(matmul(q, k_t), 1.0 / math.sqrt(d_qkv))
    pad = None
    if mask is not None:
        pad = np.asarray(mask, dtype=bool)
        if pad.shape != tuple(lead) + (n,):
            raise DimensionError(f"mask shape {pad.shape} does not match tokens {tuple(lead) + (n,)}")
        fill = np.where(pad, MASK_FILL, 0.0).astype(x.dtype)[..., None, None, :]
        scores = add(scores, fill)
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), to_heads)
    ctx = reshape(ctx, tuple(lead) + (n, width))
    out = add(matmul(ctx, params["wo"]), params["bo"])
    if pad is not None:
        out = mul(out, (~pad).astype(x.dtype)[..., None])
    return out
