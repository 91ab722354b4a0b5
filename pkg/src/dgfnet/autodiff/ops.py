"""Primitive forward/backward pairs for the autodiff engine.

Every primitive registers a forward (attrs, *arrays) -> (out, ctx) and a
backward (ctx, grad_out) -> [grad_per_input]. Shape violations raise
ShapeError naming the primitive and the offending axes. Convolution uses
im2col + GEMM; pooling/upsampling use reshape tricks so backward never
needs scatter-add loops beyond the kernel footprint.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dgfnet.autodiff.tensor import Tensor, apply, register_op
from dgfnet.errors import ContractError, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original input shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ------------------------------------------------------

def _fw_add(attrs, a, b):
    return a + b, (a.shape, b.shape)


def _bw_add(ctx, g):
    sa, sb = ctx
    return [_unbroadcast(g, sa), _unbroadcast(g, sb)]


def _fw_sub(attrs, a, b):
    return a - b, (a.shape, b.shape)


def _bw_sub(ctx, g):
    sa, sb = ctx
    return [_unbroadcast(g, sa), _unbroadcast(-g, sb)]


def _fw_mul(attrs, a, b):
    return a * b, (a, b)


def _bw_mul(ctx, g):
    a, b = ctx
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_div(attrs, a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b
    return out, (a, b)


def _bw_div(ctx, g):
    a, b = ctx
    with np.errstate(divide="ignore", invalid="ignore"):
        ga = g / b
        gb = -g * a / (b * b)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


# -- elementwise unary -------------------------------------------------------

def _fw_neg(attrs, x):
    return -x, None


def _fw_exp(attrs, x):
    with np.errstate(over="ignore"):
        y = np.exp(x)
    return y, y


def _fw_log(attrs, x):
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return y, x


def _fw_sqrt(attrs, x):
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x)
    return y, y


def _fw_abs(attrs, x):
    return np.abs(x), x


def _fw_pow_scalar(attrs, x):
    p = attrs["power"]
    with np.errstate(invalid="ignore", divide="ignore"):
        y = x ** p
    return y, (x, p)


def _bw_pow_scalar(ctx, g):
    x, p = ctx
    with np.errstate(invalid="ignore", divide="ignore"):
        gx = g * p * x ** (p - 1.0)
    return [gx]


def _fw_affine(attrs, x):
    return attrs["scale"] * x + attrs["shift"], attrs["scale"]


def _fw_relu(attrs, x):
    return np.maximum(x, 0.0), x


def _fw_sigmoid(attrs, x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def _fw_tanh(attrs, x):
    y = np.tanh(x)
    return y, y


def _fw_softmax(attrs, x):
    axis = attrs["axis"]
    # row-max subtraction for numerical stability
    z = x - np.max(x, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=axis, keepdims=True)
    return z, (z, axis)


def _bw_softmax(ctx, g):
    y, axis = ctx
    dot = np.sum(g * y, axis=axis, keepdims=True)
    return [y * (g - dot)]


# -- matmul ------------------------------------------------------------------

def _fw_matmul(attrs, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: inputs must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner axes disagree, {a.shape}[-1] != {b.shape}[-2]"
        )
    return np.matmul(a, b), (a, b)


def _bw_matmul(ctx, g):
    a, b = ctx
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


# -- structural --------------------------------------------------------------

def _fw_reshape(attrs, x):
    shape = attrs["shape"]
    try:
        return x.reshape(shape), x.shape
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}: {e}") from None


def _bw_reshape(ctx, g):
    return [g.reshape(ctx)]


def _fw_transpose(attrs, x):
    axes = attrs["axes"]
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes)), axes


def _bw_transpose(ctx, g):
    inv = np.argsort(ctx)
    return [np.ascontiguousarray(g.transpose(tuple(inv)))]


def _fw_broadcast_to(attrs, x):
    shape = attrs["shape"]
    try:
        return np.ascontiguousarray(np.broadcast_to(x, shape)), x.shape
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}: {e}") from None


def _bw_broadcast_to(ctx, g):
    return [_unbroadcast(g, ctx)]


def _fw_concat(attrs, *xs):
    axis = attrs["axis"]
    ranks = {x.ndim for x in xs}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    return np.concatenate(xs, axis=axis), (axis, [x.shape[axis] for x in xs])


def _bw_concat(ctx, g):
    axis, sizes = ctx
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _fw_slice(attrs, x):
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(
            f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(idx)]), (x.shape, axis, start, stop)


def _bw_slice(ctx, g):
    shape, axis, start, stop = ctx
    out = np.zeros(shape, dtype=g.dtype)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, stop)
    out[tuple(idx)] = g
    return [out]


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _fw_sum(attrs, x):
    axis = _norm_axis(attrs["axis"], x.ndim)
    keepdims = attrs["keepdims"]
    return x.sum(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bw_sum(ctx, g):
    shape, axis, keepdims = ctx
    return [np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims))]


def _fw_mean(attrs, x):
    axis = _norm_axis(attrs["axis"], x.ndim)
    keepdims = attrs["keepdims"]
    return x.mean(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)


def _bw_mean(ctx, g):
    shape, axis, keepdims = ctx
    n = np.prod(shape) if axis is None else np.prod([shape[a] for a in axis])
    return [np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)) / n]


# -- convolution ----------------------------------------------------------------

def _conv_geometry(name, x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"{name}: channel axis disagrees, input C={x.shape[1]} vs weight C={w.shape[1]}"
        )
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ContractError(f"{name}: 'same' padding needs stride 1 and odd kernel")
        pad = kh // 2
    else:
        pad = int(padding)
    if stride < 1:
        raise ContractError(f"{name}: stride must be >= 1, got {stride}")
    H, W = x.shape[2], x.shape[3]
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"{name}: kernel {kh}x{kw} larger than padded input {H}x{W}")
    return kh, kw, pad


def _fw_conv2d(attrs, x, w, b=None):
    stride = attrs.get("stride", 1)
    padding = attrs.get("padding", "same")
    kh, kw, pad = _conv_geometry("conv2d", x, w, stride, padding)
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kh * kw
    )
    wmat = w.reshape(O, -1)
    out2 = cols @ wmat.T
    if b is not None:
        if b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
        out2 += b
    out = out2.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    ctx = (cols, wmat, x.shape, w.shape, stride, pad, b is not None)
    return np.ascontiguousarray(out), ctx


def _bw_conv2d(ctx, g):
    cols, wmat, xshape, wshape, stride, pad, has_bias = ctx
    B, C, H, W = xshape
    O, _, kh, kw = wshape
    Ho, Wo = g.shape[2], g.shape[3]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
    gw = (g2.T @ cols).reshape(wshape)
    gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                gcols[:, :, :, :, i, j]
            )
    gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
    grads = [np.ascontiguousarray(gx), gw]
    if has_bias:
        grads.append(g.sum(axis=(0, 2, 3)))
    return grads


# -- pooling / upsampling ------------------------------------------------------

def _check_even_hw(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{name}: H,W must be even, got {x.shape[2]}x{x.shape[3]}")


def _fw_maxpool2x(attrs, x):
    _check_even_hw("maxpool2x", x)
    B, C, H, W = x.shape
    xr = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(xr).reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _bw_maxpool2x(ctx, g):
    (B, C, H, W), idx = ctx
    dflat = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
    np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
    gx = dflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return [np.ascontiguousarray(gx).reshape(B, C, H, W)]


def _fw_avgpool2x(attrs, x):
    _check_even_hw("avgpool2x", x)
    B, C, H, W = x.shape
    out = x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return out, x.shape


def _bw_avgpool2x(ctx, g):
    B, C, H, W = ctx
    gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
    return [gx]


def _fw_upsample2x(attrs, x):
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D input, got {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def _bw_upsample2x(ctx, g):
    B, C, H, W = ctx
    return [g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))]


def _register_all():
    register_op("add", _fw_add, _bw_add)
    register_op("sub", _fw_sub, _bw_sub)
    register_op("mul", _fw_mul, _bw_mul)
    register_op("div", _fw_div, _bw_div)
    register_op("neg", _fw_neg, lambda ctx, g: [-g])
    register_op("exp", _fw_exp, lambda y, g: [g * y])
    register_op("log", _fw_log, lambda x, g: [g / x])
    register_op("sqrt", _fw_sqrt, lambda y, g: [g / (2.0 * y)])
    register_op("abs", _fw_abs, lambda x, g: [g * np.sign(x)])
    register_op("pow_scalar", _fw_pow_scalar, _bw_pow_scalar)
    register_op("affine", _fw_affine, lambda scale, g: [scale * g])
    register_op("relu", _fw_relu, lambda x, g: [g * (x > 0)])
    register_op("sigmoid", _fw_sigmoid, lambda y, g: [g * y * (1.0 - y)])
    register_op("tanh", _fw_tanh, lambda y, g: [g * (1.0 - y * y)])
    register_op("softmax", _fw_softmax, _bw_softmax)
    register_op("matmul", _fw_matmul, _bw_matmul)
    register_op("reshape", _fw_reshape, _bw_reshape)
    register_op("transpose", _fw_transpose, _bw_transpose)
    register_op("broadcast_to", _fw_broadcast_to, _bw_broadcast_to)
    register_op("concat", _fw_concat, _bw_concat)
    register_op("slice", _fw_slice, _bw_slice)
    register_op("sum", _fw_sum, _bw_sum)
    register_op("mean", _fw_mean, _bw_mean)
    register_op("conv2d", _fw_conv2d, _bw_conv2d)
    register_op("maxpool2x", _fw_maxpool2x, _bw_maxpool2x)
    register_op("avgpool2x", _fw_avgpool2x, _bw_avgpool2x)
    register_op("upsample2x", _fw_upsample2x, _bw_upsample2x)


_register_all()


# -- functional wrappers -------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply("tanh", [x])


def softmax(x: Tensor, axis: int) -> Tensor:
    return apply("softmax", [x], {"axis": axis})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", [a, b])


def exp(x: Tensor) -> Tensor:
    return apply("exp", [x])


def log(x: Tensor) -> Tensor:
    return apply("log", [x])


def sqrt(x: Tensor) -> Tensor:
    return apply("sqrt", [x])


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    return apply("abs", [x])


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", [x], {"axis": axis, "keepdims": keepdims})


def concat(xs: list[Tensor], axis: int) -> Tensor:
    return apply("concat", list(xs), {"axis": axis})


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply("slice", [x], {"axis": axis, "start": start, "stop": stop})


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply("broadcast_to", [x], {"shape": tuple(shape)})


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding="same") -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply("conv2d", inputs, {"stride": stride, "padding": padding})


def maxpool2x(x: Tensor) -> Tensor:
    return apply("maxpool2x", [x])


def avgpool2x(x: Tensor) -> Tensor:
    return apply("avgpool2x", [x])


def upsample2x(x: Tensor) -> Tensor:
    return apply("upsample2x", [x])


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    return apply("affine", [x], {"scale": float(scale), "shift": float(shift)})


def mean_abs_error(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    diff = apply("abs", [apply("sub", [pred, target])])
    if reduction == "mean":
        return diff.mean()
    if reduction == "sum":
        return diff.sum()
    raise ContractError(f"unknown reduction {reduction!r}")
