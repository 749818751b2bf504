"""Differentiable ops on :class:`Tensor`.

Images use NCHW layout. Every backward returns one gradient per input (``None``
for inputs that need none); the tape skips untracked inputs.
"""
from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    s = np.sign(a.data)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result("square", x * x, (a,), lambda g: (2 * g * x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def elu(a) -> Tensor:
    """ELU with alpha = 1."""
    a = as_tensor(a)
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part)
    return make_result("elu", out, (a,), lambda g: (g * np.where(x > 0, 1, neg_part + 1),))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return make_result("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic or integer-array indexing; backward scatters with accumulation."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result("slice", out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def pad_reflect(a, pad: tuple[int, int, int, int]) -> Tensor:
    """Reflect-pad the last two axes by (top, bottom, left, right)."""
    a = as_tensor(a)
    top, bottom, left, right = pad
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    x = a.data
    # reflect padding indexes back into the source; build the map once
    h, w = x.shape[-2:]
    rows = np.pad(np.arange(h), (top, bottom), mode="reflect")
    cols = np.pad(np.arange(w), (left, right), mode="reflect")
    out = np.pad(x, widths, mode="reflect")

    def backward(g):
        gr = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(gr, (..., rows, builtins.slice(None)), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (..., cols), gr)
        return (gx,)

    return make_result("pad_reflect", out, (a,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result("matmul", ad @ bd, (a, b), backward)


def normalize(a, axis: int = -1, fallback=None) -> Tensor:
    """Scale vectors along ``axis`` to unit length.

    Zero-length vectors map to ``fallback`` (default: the last basis vector)
    and receive zero gradient.
    """
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = norm == 0
    safe = np.where(zero, 1, norm)
    out = x / safe
    if zero.any():
        if fallback is None:
            fallback = np.zeros(x.shape[axis], dtype=x.dtype)
            fallback[-1] = 1
        shape = [1] * x.ndim
        shape[axis] = -1
        out = np.where(zero, np.reshape(fallback, shape), out).astype(x.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0, (g - out * dot) / safe),)

    return make_result("normalize", out, (a,), backward)


# ---------------------------------------------------------------- normalization

def layer_norm(a, axis: int = 1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv_std = 1 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv_std

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return make_result("layer_norm", y, (a,), backward)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), weight: (O, C, kh, kw), bias: (O,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = _zero_pad(x.data, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    cols = _im2col(xp, kh, kw, stride)
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(n, o, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)
    xshape = xp.shape

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        gcols = w2.T @ g2
        gx = _col2im(gcols, xshape, kh, kw, stride, ho, wo)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv2d", out, inputs, backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d. x: (N, C, H, W), weight: (C, O, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} too large for output {hp}x{wp}")
    w2 = weight.data.reshape(c, o * kh * kw)
    xd = x.data.reshape(n, c, h * w)
    cols = np.swapaxes(w2, 0, 1) @ xd
    full = _col2im(cols, (n, o, hp, wp), kh, kw, stride, h, w)
    out = full[:, :, padding:hp - padding, padding:wp - padding]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {o} channels")
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def backward(g):
        gp = _zero_pad(g, padding)
        gcols = _im2col(gp, kh, kw, stride)
        gx = (w2 @ gcols).reshape(x.shape)
        gw = np.einsum("ncl,nkl->ck", xd, gcols).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv_transpose2d", np.ascontiguousarray(out), inputs, backward)


def avg_pool2d(x, kernel: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: spatial size {(h, w)} not divisible by {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        return (np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) * scale,)

    return make_result("avg_pool2d", out, (x,), backward)


def upsample_nearest2d(x, factor: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result("upsample_nearest2d", out, (x,), backward)
