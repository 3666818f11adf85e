"""Differentiable primitives.

Elementwise binary ops accept operands of identical shape, or one operand of
size 1 (scalar broadcast).  Anything else needs an explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape) == 1 else g.reshape(shape)


def _binary_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return record("div", (a, b), out, bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def power(x, p) -> Tensor:
    """``x ** p`` for a constant or tensor exponent.

    Fractional exponents require nonnegative bases.  At base 0 the
    derivative with respect to the base is clamped to 0 when ``p < 1``
    and the derivative with respect to the exponent is 0.
    """
    x = as_tensor(x)
    if isinstance(p, Tensor):
        _binary_shape(x, p, "power")
        pv = p.data
    else:
        pv = np.asarray(p, dtype=x.dtype)
    integral = np.all(pv == np.round(pv))
    if not integral and np.any(x.data < 0):
        raise DomainError("power of a negative base with a fractional exponent")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, pv)

    def dx(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = pv * np.power(x.data, pv - 1)
        d = np.where((x.data == 0) & (pv < 1), 0, d)
        return _unbroadcast(g * d, x.shape)

    if not isinstance(p, Tensor):
        return record("power", (x,), out, lambda g: (dx(g),))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dp = np.where(x.data > 0, out * np.log(np.where(x.data > 0, x.data, 1)), 0)
        return dx(g), _unbroadcast(g * dp, p.shape)

    return record("power", (x, p), out, bw)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return record("maximum", (a, b), np.where(pick_a, a.data, b.data),
                  lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    return record("minimum", (a, b), np.where(pick_a, a.data, b.data),
                  lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is passed only strictly inside."""
    x = as_tensor(x)
    inside = np.ones(x.shape, dtype=bool)
    out = x.data
    if lo is not None:
        inside &= x.data > lo
        out = np.maximum(out, lo)
    if hi is not None:
        inside &= x.data < hi
        out = np.minimum(out, hi)
    return record("clamp", (x,), out.astype(x.dtype), lambda g: (g * inside,))


_POINTWISE = {
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log,
    "power": power, "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
}


def op_pointwise(kind: str, *args) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(*args)


# -- reductions and shape ----------------------------------------------------


def sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), np.asarray(out, dtype=x.dtype), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return record("broadcast", (x,), out, bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record("concat", tensors, out, bw)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", (x,), np.array(out, dtype=x.dtype), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; batch axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if b.ndim != 2:
            raise ShapeError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} differ")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return record("matmul", (a, b), out, bw)


def op_linear(x, weight, bias) -> Tensor:
    """Affine map on the trailing axis: ``x @ weight.T + bias``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input trailing extent {x.shape[-1]} != Din {din}")
    if bias.shape != (dout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({dout},)")
    flat = x.data.reshape(-1, din)
    out = flat @ weight.data.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, dout)
        return (g2 @ weight.data).reshape(x.shape), g2.T @ flat, g2.sum(axis=0)

    return record("linear", (x, weight, bias), out.reshape(*x.shape[:-1], dout), bw)


linear = op_linear


def op_softmax_lastaxis(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a nonempty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), out, bw)


softmax = op_softmax_lastaxis


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits[N,K,H,W]`` against integer ``labels[N,H,W]``."""
    logits = as_tensor(logits)
    n, k = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (n,) + logits.shape[2:]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = np.moveaxis(logits.data, 1, -1).reshape(-1, k)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    flat = labels.reshape(-1).astype(np.int64)
    rows = np.arange(flat.size)
    loss = np.mean(lse - z[rows, flat])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, flat] -= 1
        p *= g / flat.size
        p = p.reshape(n, *logits.shape[2:], k)
        return (np.moveaxis(p, -1, 1).astype(logits.dtype),)

    return record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bw)


# -- spatial -----------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def op_conv2d(x, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding, ``x[N,C,H,W] * weight[K,C,kh,kw]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels C={c} but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents kh={kh}, kw={kw} must be odd")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(k, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0)
        if not x.tracked:
            return None, gw, gb
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return record("conv2d", (x, weight, bias), np.ascontiguousarray(out), bw)


conv2d = op_conv2d


def _edge_matrix(n: int, p: int, dtype) -> np.ndarray:
    idx = np.clip(np.arange(-p, n + p), 0, n - 1)
    m = np.zeros((n + 2 * p, n), dtype=dtype)
    m[np.arange(n + 2 * p), idx] = 1
    return m


def pad_replicate(x, pad: int) -> Tensor:
    """Replicate-pad the last two axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    rows = _edge_matrix(h, pad, x.dtype)
    cols = _edge_matrix(w, pad, x.dtype)
    out = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)], mode="edge")
    return record("pad_replicate", (x,), out, lambda g: (rows.T @ g @ cols,))


def filter2d(xp, kernel) -> Tensor:
    """Valid cross-correlation of ``xp[..., H+kh-1, W+kw-1]`` with a shared 2-d ``kernel``."""
    xp, kernel = as_tensor(xp), as_tensor(kernel)
    kh, kw = kernel.shape
    h = xp.shape[-2] - kh + 1
    w = xp.shape[-1] - kw + 1
    if h < 1 or w < 1:
        raise ShapeError(f"filter2d: input {xp.shape[-2:]} smaller than kernel {kernel.shape}")
    kd = kernel.data
    out = np.zeros(xp.shape[:-2] + (h, w), dtype=np.result_type(xp.dtype, kd.dtype))
    for i in range(kh):
        for j in range(kw):
            out += kd[i, j] * xp.data[..., i:i + h, j:j + w]

    def bw(g):
        gx = np.zeros_like(xp.data)
        gk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                gx[..., i:i + h, j:j + w] += kd[i, j] * g
                gk[i, j] = np.sum(g * xp.data[..., i:i + h, j:j + w])
        return gx, gk

    return record("filter2d", (xp, kernel), out, bw)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def bw(g):
        g = g.reshape(*x.shape[:-2], h, factor, w, factor)
        return (g.sum(axis=(-3, -1)),)

    return record("upsample", (x,), out, bw)


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations", "np", "sliding_window_view")]
