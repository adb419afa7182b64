"""Differentiable operations over `Tensor`.

Each function computes its forward value with numpy and registers a backward
closure. All ops accept arbitrary leading batch dimensions unless noted, which
lets the window-level transformer process every match window in one pass.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN so corrupted weights surface in the loss
    return Tensor.from_op(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def phi(a: Tensor) -> Tensor:
    """elu(x) + 1: x + 1 for x >= 0, exp(x) otherwise. Strictly positive."""
    x = a.data
    pos = x >= 0
    e = np.exp(np.minimum(x, 0))
    out = np.where(pos | np.isnan(x), x + 1, e).astype(a.dtype)
    deriv = np.where(pos, 1, e).astype(a.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * deriv,), "phi")


def clamp(a: Tensor, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clip to [lo, hi]; ``straight_through`` passes the gradient unmasked."""
    out = np.clip(a.data, lo, hi)
    if straight_through:
        return Tensor.from_op(out, (a,), lambda g: (g,), "clamp_st")
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(out, (a,), lambda g: (g * inside,), "clamp")


# ------------------------------------------------------------------ reductions
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at the origin is taken as 0."""
    out = np.sqrt((a.data * a.data).sum(axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (a.data * scale[..., None],)

    return Tensor.from_op(out, (a,), backward, "row_norm")


# -------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor.from_op(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, backward, "concat")


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into place."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out, copy=True), (a,), backward, "index")


# ------------------------------------------------------------------- algebra
def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map: ``x @ w.T + b`` with ``w`` of shape (Dout, Din)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "linear")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor.from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with biased variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- convolution
def dw_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Depth-wise 2-D cross-correlation with zero padding preserving H and W.

    Args:
        x: (..., C, H, W) feature map.
        kernels: (C, k, k) per-channel filters, k odd.
    """
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"dw_conv2d: kernels must be (C, k, k), got {kernels.shape}")
    c, k, _ = kernels.shape
    if k % 2 == 0:
        raise ShapeError("dw_conv2d: kernel size must be odd")
    if x.ndim < 3 or x.shape[-3] != c:
        raise ShapeError(f"dw_conv2d: input channels {x.shape} do not match kernels {kernels.shape}")
    h, w = x.shape[-2:]
    p = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x.data, pad)
    kd = kernels.data
    out = np.zeros(x.shape, dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out += kd[:, dy, dx, None, None] * xp[..., dy : dy + h, dx : dx + w]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gk = np.zeros(kd.shape, dtype=g.dtype)
        lead = tuple(range(g.ndim - 3))
        for dy in range(k):
            for dx in range(k):
                gxp[..., dy : dy + h, dx : dx + w] += kd[:, dy, dx, None, None] * g
                prod = g * xp[..., dy : dy + h, dx : dx + w]
                gk[:, dy, dx] = prod.sum(axis=lead + (-2, -1))
        return gxp[..., p : p + h, p : p + w], gk

    return Tensor.from_op(out, (x, kernels), backward, "dw_conv2d")


def _channel_outer(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum over batch and space of g[..., o, h, w] * x[..., i, h, w] -> (O, I)."""
    o, i = g.shape[-3], x.shape[-3]
    g2 = g.reshape((-1, o, g.shape[-2] * g.shape[-1]))
    x2 = x.reshape((-1, i, x.shape[-2] * x.shape[-1]))
    return np.einsum("boh,bih->oi", g2, x2)


def pw_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution mixing channels: out[o] = sum_i w[o, i] x[i] + b[o]."""
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"pw_conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"pw_conv2d: bias {b.shape} does not match weight {w.shape}")
    xs = x.data
    out = np.einsum("oi,...ihw->...ohw", w.data, xs)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gx = np.einsum("oi,...ohw->...ihw", w.data, g)
        gw = _channel_outer(g, xs)
        gb = g.sum(axis=tuple(range(g.ndim - 3)) + (-2, -1)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out.astype(x.dtype), parents, backward, "pw_conv2d")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation.

    Args:
        x: (..., Cin, H, W)
        w: (Cout, Cin, k, k)
        b: optional (Cout,)
    """
    if w.ndim != 4 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    h, wd = x.shape[-2:]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x.data, pad)
    wdat = w.data
    span_y = stride * (ho - 1) + 1
    span_x = stride * (wo - 1) + 1
    out_shape = x.shape[:-3] + (w.shape[0], ho, wo)
    out = np.zeros(out_shape, dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            patch = xp[..., dy : dy + span_y : stride, dx : dx + span_x : stride]
            out += np.einsum("oi,...ihw->...ohw", wdat[:, :, dy, dx], patch)
    if b is not None:
        out += b.data[:, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros(wdat.shape, dtype=g.dtype)
        for dy in range(k):
            for dx in range(k):
                sl = (Ellipsis, slice(dy, dy + span_y, stride), slice(dx, dx + span_x, stride))
                gxp[sl] += np.einsum("oi,...ohw->...ihw", wdat[:, :, dy, dx], g)
                gw[:, :, dy, dx] = _channel_outer(g, xp[sl])
        gx = gxp[..., padding : padding + h, padding : padding + wd]
        gb = g.sum(axis=tuple(range(g.ndim - 3)) + (-2, -1)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (..., C, H, W)."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        h, w = x.shape[-2:]
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return Tensor.from_op(out, (x,), backward, "upsample2x")


# ------------------------------------------------------------ seq <-> image
def seq_to_image(x: Tensor, h8: int, w8: int) -> Tensor:
    """(..., N, C) -> (..., C, H8, W8); row n lands at (n // W8, n % W8)."""
    n, c = x.shape[-2:]
    if n != h8 * w8:
        raise ShapeError(f"seq_to_image: {n} tokens cannot fill a {h8}x{w8} grid")
    lead = x.shape[:-2]
    return swapaxes(x, -1, -2).reshape(lead + (c, h8, w8))


def image_to_seq(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., H*W, C), row-major over (H, W)."""
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    return swapaxes(x.reshape(lead + (c, h * w)), -1, -2)
