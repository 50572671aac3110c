"""Differentiable ops over float64 tensors.

Broadcasting is limited to leading dimensions: the smaller operand's shape must
be a suffix of the larger one.  Every op checks its output is finite.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from errors import DegenerateBatchError, ShapeError
from numerics.tensor import Tensor, as_tensor, record

_GELU_C = math.sqrt(2.0 / math.pi)


def _suffix_shape(a: tuple, b: tuple) -> tuple:
    """Result shape for leading-dim broadcasting of a and b."""
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if tuple(big[len(big) - len(small):]) != tuple(small):
        raise ShapeError(f"cannot broadcast shapes {list(a)} and {list(b)} (only leading dims broadcast)")
    return tuple(big)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_shape(a.shape, b.shape)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_shape(a.shape, b.shape)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_shape(a.shape, b.shape)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record("log", out, (a,), lambda g: (g / a.data,))


def matmul(a, b) -> Tensor:
    """[..., m, k] @ [..., k, n]; b may also be a plain [k, n] matrix shared across leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {list(a.shape)} @ {list(b.shape)}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {list(a.shape)} @ {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return record("matmul", out, (a, b), rule)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {list(a.shape)} to {list(shape)}") from e
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def select(a, key) -> Tensor:
    """a[key] for basic or integer-array keys."""
    a = as_tensor(a)
    out = np.array(a.data[key], dtype=np.float64)

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return record("select", out, (a,), rule)


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum", np.asarray(out, dtype=np.float64), (a,), rule)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def sum_masked(x, mask, mean: bool = False, normalizer: Optional[float] = None) -> Tensor:
    """Σ x·mask, optionally divided by Σ mask (mean=True) or by an explicit normalizer."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {list(m.shape)} does not match {list(x.shape)}")
    if normalizer is not None:
        denom = float(normalizer)
        if denom <= 0:
            raise DegenerateBatchError("masked mean over an empty mask")
    elif mean:
        denom = float(m.sum())
        if denom == 0:
            raise DegenerateBatchError("masked mean over an empty mask")
    else:
        denom = 1.0
    out = np.asarray(np.sum(x.data * m) / denom, dtype=np.float64)
    return record("sum_masked", out, (x,), lambda g: (g * m / denom,))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return record("gelu", out, (a,), rule)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm affine shapes {list(gain.shape)}/{list(bias.shape)} "
                         f"do not match feature dim of {list(x.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layernorm", out, (x, gain, bias), rule)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range for embedding table {list(table.shape)}")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record("embedding_lookup", table.data[idx], (table,), rule)


def gather(x, idx) -> Tensor:
    """Pick entries along the last dim.

    idx with shape x.shape[:-1] picks one entry per row (result drops the last
    dim); idx with shape x.shape[:-1] + (k,) picks k entries per row.
    """
    x = as_tensor(x)
    index = np.asarray(idx, dtype=np.int64)
    squeeze = index.ndim == x.ndim - 1
    full_index = index[..., None] if squeeze else index
    if full_index.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather index shape {list(index.shape)} does not fit {list(x.shape)}")
    if full_index.size and (full_index.min() < 0 or full_index.max() >= x.shape[-1]):
        raise ShapeError(f"gather index out of range for last dim {x.shape[-1]}")
    picked = np.take_along_axis(x.data, full_index, axis=-1)
    out = picked[..., 0] if squeeze else picked

    def rule(g):
        full = np.zeros_like(x.data)
        gg = g[..., None] if squeeze else g
        lead = np.indices(full_index.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, full_index), gg)
        return (full,)

    return record("gather", np.ascontiguousarray(out), (x,), rule)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", out, (x,), rule)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), rule)


def log_sigmoid(x) -> Tensor:
    """log σ(x) = -softplus(-x), evaluated without overflow."""
    x = as_tensor(x)
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))

    def rule(g):
        # d/dz log σ(z) = σ(-z)
        return (g * np.exp(-z - np.logaddexp(0.0, -z)),)

    return record("log_sigmoid", out, (x,), rule)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum needs equal shapes, got {list(a.shape)} and {list(b.shape)}")
    pick_a = a.data <= b.data
    return record("minimum", np.where(pick_a, a.data, b.data), (a, b),
                  lambda g: (g * pick_a, g * ~pick_a))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))
