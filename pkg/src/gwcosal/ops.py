"""Layer primitives on dense (n, c, h, w) arrays, each with a matching gradient.

Every forward function returns ``(y, ctx)``; the matching ``*_grad`` consumes
``ctx`` and the upstream gradient. Arrays are plain ``numpy.ndarray`` and keep
their dtype, so float32 is used for training and float64 for gradient checks.
Nothing here mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


@dataclass
class ConvParams:
    """Weights ``(a, b, kh, kw)``, bias, stride and zero padding.

    ``conv2d`` maps ``b`` input channels to ``a`` output channels. ``deconv2d``
    uses the same tensor as its adjoint, mapping ``a`` channels to ``b``, and
    therefore takes a bias of length ``b``.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0


@dataclass
class ConvContext:
    in_shape: tuple
    out_shape: tuple
    cols: np.ndarray  # im2col matrix of the (padded) conv input
    params: ConvParams


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride + k - 2 * pad


def _im2col(x, kh, kw, stride, pad, oh, ow):
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, c*kh*kw, oh*ow)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hspan = (oh - 1) * stride + 1
    wspan = (ow - 1) * stride + 1
    # fixed accumulation order keeps results bit-deterministic
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + hspan : stride, v : v + wspan : stride] += cols[:, :, u, v]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def _check_params(p: ConvParams):
    if p.weights.ndim != 4:
        raise ShapeError(f"weights must be 4-D, got shape {p.weights.shape}")
    if p.stride < 1 or p.pad < 0:
        raise ValueError(f"invalid stride/pad ({p.stride}, {p.pad})")


def conv2d(x: np.ndarray, p: ConvParams):
    """Zero-padded cross-correlation: ``y[n,o] = b[o] + sum_c w[o,c] * x[n,c]``."""
    _check4(x)
    _check_params(p)
    o, c, kh, kw = p.weights.shape
    n, xc, h, w = x.shape
    if xc != c:
        raise ShapeError(f"conv2d: input has {xc} channels, weights expect {c} (weights {p.weights.shape})")
    if p.bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {p.bias.shape} does not match {o} output channels")
    oh = conv_out_size(h, kh, p.stride, p.pad)
    ow = conv_out_size(w, kw, p.stride, p.pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output size {oh}x{ow} from input {h}x{w}, kernel {kh}x{kw}")
    cols = _im2col(x, kh, kw, p.stride, p.pad, oh, ow)
    y = np.matmul(p.weights.reshape(o, -1), cols)
    y += p.bias[:, None]
    y = y.reshape(n, o, oh, ow)
    return y, ConvContext(x.shape, y.shape, cols, p)


def conv2d_grad(ctx: ConvContext, dy: np.ndarray):
    """Return ``(dx, dw, db)`` for :func:`conv2d`."""
    if dy.shape != ctx.out_shape:
        raise ShapeError(f"conv2d_grad: dY shape {dy.shape} != forward output {ctx.out_shape}")
    p = ctx.params
    o, c, kh, kw = p.weights.shape
    n, _, oh, ow = dy.shape
    dy2 = dy.reshape(n, o, oh * ow)
    db = dy2.sum(axis=(0, 2))
    dw = np.tensordot(dy2, ctx.cols, axes=([0, 2], [0, 2])).reshape(p.weights.shape)
    dcols = np.matmul(p.weights.reshape(o, -1).T, dy2)
    dx = _col2im(dcols, ctx.in_shape, kh, kw, p.stride, p.pad, oh, ow)
    return dx, dw, db


def deconv2d(x: np.ndarray, p: ConvParams):
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weights."""
    _check4(x)
    _check_params(p)
    a, b, kh, kw = p.weights.shape
    n, xc, h, w = x.shape
    if xc != a:
        raise ShapeError(f"deconv2d: input has {xc} channels, weights expect {a} (weights {p.weights.shape})")
    if p.bias.shape != (b,):
        raise ShapeError(f"deconv2d: bias shape {p.bias.shape} does not match {b} output channels")
    if kh < p.stride or kw < p.stride:
        raise ValueError(f"deconv2d: kernel {kh}x{kw} smaller than stride {p.stride}")
    oh = deconv_out_size(h, kh, p.stride, p.pad)
    ow = deconv_out_size(w, kw, p.stride, p.pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv2d: output size {oh}x{ow} from input {h}x{w}")
    x2 = x.reshape(n, a, h * w)
    cols = np.matmul(p.weights.reshape(a, -1).T, x2)
    y = _col2im(cols, (n, b, oh, ow), kh, kw, p.stride, p.pad, h, w)
    y += p.bias[None, :, None, None]
    return y, ConvContext(x.shape, y.shape, x2, p)


def deconv2d_grad(ctx: ConvContext, dy: np.ndarray):
    """Return ``(dx, dw, db)`` for :func:`deconv2d`."""
    if dy.shape != ctx.out_shape:
        raise ShapeError(f"deconv2d_grad: dY shape {dy.shape} != forward output {ctx.out_shape}")
    p = ctx.params
    a, b, kh, kw = p.weights.shape
    n, _, h, w = ctx.in_shape
    db = dy.sum(axis=(0, 2, 3))
    dcols = _im2col(dy, kh, kw, p.stride, p.pad, h, w)
    w2 = p.weights.reshape(a, -1)
    dx = np.matmul(w2, dcols).reshape(ctx.in_shape)
    dw = np.tensordot(ctx.cols, dcols, axes=([0, 2], [0, 2])).reshape(p.weights.shape)
    return dx, dw, db


def make_bilinear_kernel(factor: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Upsampling kernel of size ``2f - f % 2`` for a stride-``f`` deconvolution.

    Each channel only feeds its own output channel. Use with ``pad = f // 2`` to
    get an exact ``f``-times upsampling.
    """
    if factor < 1 or channels < 1:
        raise ValueError(f"factor and channels must be positive, got {factor}, {channels}")
    k = 2 * factor - factor % 2
    center = (2 * factor - 1 - factor % 2) / (2 * factor)
    profile = 1.0 - np.abs(np.arange(k) / factor - center)
    kernel2d = np.outer(profile, profile)
    out = np.zeros((channels, channels, k, k), dtype=dtype)
    for ch in range(channels):
        out[ch, ch] = kernel2d
    return out


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_grad(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if dy.shape != mask.shape:
        raise ShapeError(f"relu_grad: dY shape {dy.shape} != {mask.shape}")
    # derivative at exactly 0 is 0
    return np.where(mask, dy, np.zeros((), dtype=dy.dtype))


@dataclass
class PoolContext:
    in_shape: tuple
    argmax: np.ndarray


def maxpool2(x: np.ndarray):
    """2x2 max pooling with stride 2; ties resolve to the first element in row-major order."""
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolContext(x.shape, idx)


def maxpool2_grad(ctx: PoolContext, dy: np.ndarray) -> np.ndarray:
    n, c, h, w = ctx.in_shape
    if dy.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"maxpool2_grad: dY shape {dy.shape} != {(n, c, h // 2, w // 2)}")
    onehot = np.arange(4) == ctx.argmax[..., None]
    win = np.where(onehot, dy[..., None], np.zeros((), dtype=dy.dtype))
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for x in xs:
        _check4(x)
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: shape {x.shape} incompatible with {xs[0].shape}")
    return np.concatenate(xs, axis=1)


def split_channels(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`; also routes gradients back to the parts."""
    _check4(x)
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(x, bounds, axis=1)]


def sgd_update(param, grad, vel, lr, momentum, weight_decay):
    """Classical momentum SGD with L2 weight decay; returns new ``(param, vel)``.

    ``vel' = momentum * vel + (grad + weight_decay * param)`` and
    ``param' = param - lr * vel'``.
    """
    if param.shape != grad.shape or param.shape != vel.shape:
        raise ShapeError(f"sgd_update: shapes {param.shape}, {grad.shape}, {vel.shape} differ")
    for name, arr in (("param", param), ("grad", grad), ("vel", vel)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"sgd_update: non-finite values in {name}")
    g = grad + weight_decay * param
    vel = momentum * vel + g
    param = param - lr * vel
    return param, vel
