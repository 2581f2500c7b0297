"""Differentiable building blocks on top of :mod:`drrg.numerics.tensor`.

Each function returns a new :class:`Tensor` and registers a closure that maps
the upstream gradient to gradients of its inputs.
"""

from __future__ import annotations

import numpy as np

from drrg.errors import ContractError, DimensionError, NumericDomainError
from drrg.numerics import _kernels
from drrg.numerics.tensor import Tensor, as_tensor, concat, make, stack


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericDomainError(f"non-finite input to {op}")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    _check_finite(x.data, "log")
    if (x.data <= 0).any():
        raise NumericDomainError("log of a non-positive value")
    xd = x.data
    return make(np.log(xd), (x,), lambda g: (g / xd,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries;
    a row with no kept entries yields all zeros.
    """
    xd = x.data
    if mask is None:
        _check_finite(xd, "softmax")
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.isfinite(xd[mask]).all():
            raise NumericDomainError("non-finite input to softmax")
        z = np.where(mask, xd, -np.inf)
        top = z.max(axis=-1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(z - top), 0.0)
        total = e.sum(axis=-1, keepdims=True)
        out = e / np.where(total > 0, total, 1.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd, "log_softmax")
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make(out, (x,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[..., index[...]]``: select one entry of the last axis per position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick index shape {index.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean token negative log-likelihood, log-softmax fused for stability.

    ``weights`` (same shape as ``targets``) excludes padding when zero.
    """
    xd = logits.data
    _check_finite(xd, "cross_entropy")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != xd.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} vs logits {xd.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = w.sum()
    if norm <= 0:
        raise ContractError("cross_entropy over zero weighted positions")
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = (nll * w).sum() / norm

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / norm)[..., None] * g,)

    return make(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    x = logits.data
    _check_finite(x, "bce_with_logits")
    t = np.asarray(targets, dtype=np.float64)
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def backward(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x)) - t) / n,)

    return make(np.asarray(loss), (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, n)
        ggamma = (g * xhat).reshape(flat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(flat).sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make(table.data[ids], (table,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    # weight stored (in, out); leading dims are folded so the weight gradient
    # is one 2-d product rather than a batched one reduced afterwards
    lead = x.shape[:-1]
    if len(lead) > 1:
        y = x.reshape(-1, x.shape[-1]) @ weight
        y = y.reshape(*lead, weight.shape[-1])
    else:
        y = x @ weight
    return y if bias is None else y + bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W); weight: (F, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    cols, oh, ow = _kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(f, -1)
    out = np.matmul(wmat, cols).reshape(b, f, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    xshape = x.shape

    def backward(g):
        gm = g.reshape(b, f, oh * ow)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            gx = _kernels.col2im(gcols, xshape, kh, kw, stride, pad, oh, ow)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a (B, C, H, W) map -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
    return x.mean(axis=(2, 3))


def scatter_last(weights: Tensor, ids: np.ndarray, size: int) -> Tensor:
    """Sum weights (B, T, M) into buckets ``ids`` (B, M) of a (B, T, size) output."""
    ids = np.asarray(ids, dtype=np.int64)
    if weights.ndim != 3 or ids.shape != (weights.shape[0], weights.shape[2]):
        raise DimensionError(f"scatter_last: weights {weights.shape} vs ids {ids.shape}")
    out = _kernels.scatter_last(weights.data, ids, size)
    return make(out, (weights,), lambda g: (_kernels.gather_last(g, ids),))


def gather_last(values: Tensor, ids: np.ndarray) -> Tensor:
    """values (B, T, V) at columns ids (B, M) -> (B, T, M)."""
    ids = np.asarray(ids, dtype=np.int64)
    size = values.shape[-1]
    out = _kernels.gather_last(values.data, ids)
    return make(out, (values,), lambda g: (_kernels.scatter_last(g, ids, size),))


def where_const(cond: np.ndarray, x: Tensor, fill: float = 0.0) -> Tensor:
    """Keep x where cond, otherwise a constant (no gradient there)."""
    cond = np.broadcast_to(cond, x.shape)
    return make(np.where(cond, x.data, fill), (x,), lambda g: (np.where(cond, g, 0.0),))


__all__ = [
    "as_tensor",
    "bce_with_logits",
    "concat",
    "conv2d",
    "cross_entropy",
    "embedding",
    "exp",
    "gather_last",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "pick",
    "relu",
    "scatter_last",
    "sigmoid",
    "softmax",
    "stack",
    "tanh",
    "where_const",
]
