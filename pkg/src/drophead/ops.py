"""Differentiable ops over :class:`~drophead.tensor.Tensor`.

Shapes must match exactly, with two exceptions: a bias may be added over the
leading axes (``add`` with ``b.shape == a.shape[-b.ndim:]``), and ``matmul``
lets a 2-D right operand be shared by every leading batch index of the left
operand. Every op checks its output for NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, _result, as_tensor

LAYER_NORM_EPS = 1e-5


def _leading_sum(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the leading axes it has beyond ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _const(x, like: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=like.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either 2-D (shared across the
    batch) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a bias over the leading axes of ``a``."""
    if not isinstance(b, Tensor):
        c = _const(b, a)
        if c.ndim and c.shape != a.shape[-c.ndim:]:
            raise ShapeError(f"add: constant of shape {c.shape} does not fit {a.shape}")
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.ndim < b.ndim:
        a, b = b, a
    if a.shape != b.shape and (b.ndim == 0 or a.shape[-b.ndim:] != b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (only trailing bias-add is allowed)")
    bshape = b.shape

    def backward(g):
        return g, _leading_sum(g, bshape)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -np.asarray(b))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or scaling by a Python scalar."""
    if not isinstance(b, Tensor):
        if np.ndim(b) != 0:
            raise ShapeError("mul: non-tensor operand must be a scalar; use mul_const for arrays")
        c = float(b)
        return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (dropout masks)."""
    c = _const(c, a)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: constant shape {c.shape} != {a.shape}")
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(sum(a), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (bool, broadcastable to ``x``) marks admissible entries; the rest
    are set to -inf before the softmax and come out as exact zeros.
    """
    X = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, X.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row has every entry masked")
        X = np.where(mask, X, -np.inf)
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    G = gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _leading_sum(g * xhat, (d,)) if gain.requires_grad else None
        gbias = _leading_sum(g, (d,)) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(xhat * G + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy_loss(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of negative log-softmax probabilities of ``targets``.

    Without ``weights`` this is the mean over rows. Rows with weight 0 (padding)
    contribute nothing to the value or the gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects [n, V] logits, got {logits.shape}")
    n, V = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: targets shape {t.shape} != ({n},)")
    if n and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target index out of range for {V} classes")
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        if w.shape != (n,):
            raise ShapeError(f"cross_entropy_loss: weights shape {w.shape} != ({n},)")
    X = logits.data
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(n)
    nll = lse - X[rows, t]
    loss = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def backward(g):
        p = e / s
        p[rows, t] -= 1
        return (p * (w * g)[:, None],)

    return _result(loss, (logits,), backward, "cross_entropy_loss")


def embedding(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table`` [V, d] at integer positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"token index out of range for vocabulary of {V}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _result(table.data[idx], (table,), backward, "embedding")


def scale_heads(x: Tensor, s) -> Tensor:
    """Multiply each head slice of ``x`` [..., H, l, d_head] by a factor.

    ``s`` has shape ``x.shape[:-2]`` (one factor per example and head) or
    ``(H,)`` (shared across the batch). It may be a constant array or a Tensor;
    in the latter case it receives a gradient.
    """
    S = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=x.dtype)
    lead = x.shape[:-2]
    if S.shape != lead and S.shape != lead[-1:]:
        raise ShapeError(f"scale_heads: factor shape {S.shape} does not fit heads {lead}")
    S = S.astype(x.dtype, copy=False)
    X = x.data
    out = X * S[..., None, None]
    if not isinstance(s, Tensor):
        return _result(out, (x,), lambda g: (g * S[..., None, None],), "scale_heads")
    sshape = S.shape

    def backward(g):
        gx = g * S[..., None, None] if x.requires_grad else None
        gs = None
        if s.requires_grad:
            gs = _leading_sum((g * X).sum(axis=(-1, -2)), sshape)
        return gx, gs

    return _result(out, (x, s), backward, "scale_heads")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted elementwise dropout; identity when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul_const(x, keep / (1.0 - rate))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` [B, l, d] over positions where ``mask`` [B, l] is true."""
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean: mask {m.shape} does not fit {x.shape}")
    count = m.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        raise ValueError("masked_mean: an example has no unmasked positions")
    w = (m / count)[..., None]
    return _result((x.data * w).sum(axis=-2), (x,), lambda g: (g[..., None, :] * w,), "masked_mean")


__all__ = [
    "NonFiniteError",
    "ShapeError",
    "add",
    "as_tensor",
    "cross_entropy_loss",
    "dropout",
    "embedding",
    "layer_norm",
    "masked_mean",
    "matmul",
    "mean",
    "mul",
    "mul_const",
    "neg",
    "relu",
    "reshape",
    "scale_heads",
    "softmax_rows",
    "sub",
    "sum",
    "swap_last",
    "tanh",
    "transpose",
]
