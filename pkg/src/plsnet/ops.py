"""Primitive layers with hand-written reverse-mode gradients.

Kernels are plain arrays:

* regular kernel ``w``: ``(k, k, k, m, n)``
* depthwise kernel ``d``: ``(k, k, k, m)``
* pointwise kernel ``p``: ``(m, n)``

Convolutions follow the cross-correlation convention (no kernel flip) and
carry no bias; a batch-norm layer always supplies the shift. Every forward op
``f`` has a ``f_backward`` that takes the upstream gradient plus the forward
inputs and returns gradients for inputs and parameters. Ops are dtype
preserving so gradient checks can run in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeMismatchError, shape4

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ConvGeometry:
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid geometry {self}")

    @classmethod
    def same(cls, k: int, dilation: int = 1, stride: int = 1) -> "ConvGeometry":
        """Padding that keeps extents unchanged at stride 1 (halves them at stride 2)."""
        return cls(stride=stride, dilation=dilation, padding=dilation * (k - 1) // 2)

    def span(self, k: int) -> int:
        return self.dilation * (k - 1) + 1

    def out_extent(self, n: int, k: int) -> int:
        o = (n + 2 * self.padding - self.span(k)) // self.stride + 1
        if o < 1:
            raise ShapeMismatchError(
                f"non-positive output extent for input {n}, kernel {k}, {self}"
            )
        return o

    def out_spatial(self, spatial: Sequence[int], k: int) -> tuple[int, int, int]:
        return tuple(self.out_extent(n, k) for n in spatial)


def _check_kernel_extent(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel extent must be odd and >= 1, got {k}")


def _padded(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))


def _taps(k: int, geom: ConvGeometry, out: Sequence[int]):
    """Yield ``((i, j, l), slices)`` selecting the padded-input voxels each tap reads."""
    s, r = geom.stride, geom.dilation
    for i in range(k):
        for j in range(k):
            for l in range(k):
                sl = tuple(
                    slice(a * r, a * r + s * (o - 1) + 1, s) for a, o in zip((i, j, l), out)
                )
                yield (i, j, l), sl


def _check_grad(grad: np.ndarray, expected: Sequence[int]):
    if tuple(grad.shape) != tuple(expected):
        raise ShapeMismatchError(
            f"upstream gradient shape {grad.shape} does not match forward output {tuple(expected)}"
        )


# --- regular / dilated convolution -------------------------------------------------


def conv3d(x: np.ndarray, w: np.ndarray, geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """``y[h,w,d,n] = sum_{i,j,k,m} x[s*h + r*i, s*w + r*j, s*d + r*k, m] * w[i,j,k,m,n]``
    on the zero-padded input. ``r=1`` is the ordinary convolution."""
    sx = shape4(x)
    k, _, _, m, n = w.shape
    _check_kernel_extent(k)
    if sx.c != m:
        raise ShapeMismatchError(f"input has {sx.c} channels, kernel expects {m}")
    out = geom.out_spatial(sx.spatial, k)
    xp = _padded(x, geom.padding)
    y = np.zeros((*out, n), dtype=np.result_type(x, w))
    for (i, j, l), sl in _taps(k, geom, out):
        y += np.tensordot(xp[sl], w[i, j, l], axes=([3], [0]))
    return y


def conv3d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray,
                    geom: ConvGeometry = ConvGeometry()):
    """Return ``(grad_x, grad_w)``."""
    sx = shape4(x)
    k, _, _, m, n = w.shape
    out = geom.out_spatial(sx.spatial, k)
    _check_grad(grad, (*out, n))
    xp = _padded(x, geom.padding)
    gxp = np.zeros_like(xp, dtype=np.result_type(x, grad))
    gw = np.zeros_like(w, dtype=np.result_type(w, grad))
    g2 = grad.reshape(-1, n)
    for (i, j, l), sl in _taps(k, geom, out):
        gw[i, j, l] = xp[sl].reshape(-1, m).T @ g2
        gxp[sl] += np.tensordot(grad, w[i, j, l], axes=([3], [1]))
    p = geom.padding
    gx = gxp[p:p + sx.h, p:p + sx.w, p:p + sx.d] if p else gxp
    return np.ascontiguousarray(gx), gw


# --- depthwise separable pieces ----------------------------------------------------


def depthwise_conv3d(x: np.ndarray, d: np.ndarray,
                     geom: ConvGeometry = ConvGeometry()) -> np.ndarray:
    """Per-channel spatial convolution: channel ``c`` of the output only sees channel ``c``."""
    sx = shape4(x)
    k, _, _, m = d.shape
    _check_kernel_extent(k)
    if sx.c != m:
        raise ShapeMismatchError(f"input has {sx.c} channels, depthwise kernel expects {m}")
    out = geom.out_spatial(sx.spatial, k)
    xp = _padded(x, geom.padding)
    dtype = np.result_type(x, d)
    y = np.zeros((*out, m), dtype=dtype)
    tmp = np.empty_like(y)
    for (i, j, l), sl in _taps(k, geom, out):
        np.multiply(xp[sl], d[i, j, l], out=tmp)
        y += tmp
    return y


def depthwise_conv3d_backward(grad: np.ndarray, x: np.ndarray, d: np.ndarray,
                              geom: ConvGeometry = ConvGeometry()):
    """Return ``(grad_x, grad_d)``."""
    sx = shape4(x)
    k, _, _, m = d.shape
    out = geom.out_spatial(sx.spatial, k)
    _check_grad(grad, (*out, m))
    xp = _padded(x, geom.padding)
    dtype = np.result_type(x, d, grad)
    gxp = np.zeros(xp.shape, dtype=dtype)
    gd = np.zeros(d.shape, dtype=dtype)
    tmp = np.empty(grad.shape, dtype=dtype)
    for (i, j, l), sl in _taps(k, geom, out):
        np.multiply(xp[sl], grad, out=tmp)
        gd[i, j, l] = tmp.sum(axis=(0, 1, 2))
        np.multiply(grad, d[i, j, l], out=tmp)
        gxp[sl] += tmp
    p = geom.padding
    gx = gxp[p:p + sx.h, p:p + sx.w, p:p + sx.d] if p else gxp
    return np.ascontiguousarray(gx), gd


def pointwise_conv3d(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    sx = shape4(x)
    if p.ndim != 2 or p.shape[0] != sx.c:
        raise ShapeMismatchError(f"input has {sx.c} channels, pointwise kernel is {p.shape}")
    return (x.reshape(-1, sx.c) @ p).reshape(*sx.spatial, p.shape[1])


def pointwise_conv3d_backward(grad: np.ndarray, x: np.ndarray, p: np.ndarray):
    """Return ``(grad_x, grad_p)``."""
    sx = shape4(x)
    _check_grad(grad, (*sx.spatial, p.shape[1]))
    g2 = grad.reshape(-1, p.shape[1])
    gx = (g2 @ p.T).reshape(sx)
    gp = x.reshape(-1, sx.c).T @ g2
    return gx, gp


def compose_factorised_kernel(d: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Full kernel equivalent to depthwise ``d`` followed by pointwise ``p``:
    ``w[i,j,k,m,n] = d[i,j,k,m] * p[m,n]``."""
    if d.shape[3] != p.shape[0]:
        raise ShapeMismatchError(
            f"depthwise kernel has {d.shape[3]} channels, pointwise expects {p.shape[0]}"
        )
    return d[..., :, None] * p[None, None, None, :, :]


# --- batch norm ----------------------------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics.

    With batch size 1 the training statistics are taken over the spatial
    extent of the single volume. ``running_var`` tracks the unbiased variance.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    return mean, var


def batch_norm(x: np.ndarray, params: BatchNormParams, train: bool,
               track: bool = True) -> np.ndarray:
    """Normalise each channel. In train mode the running statistics are also
    updated in place (moving average with ``params.momentum``) unless ``track``
    is false, which recomputation during backward relies on."""
    sx = shape4(x)
    if sx.c != params.channels:
        raise ShapeMismatchError(f"input has {sx.c} channels, batch norm has {params.channels}")
    if train:
        mean, var = _bn_stats(x)
    else:
        mean, var = params.running_mean, params.running_var
    if train and track:
        n = sx.h * sx.w * sx.d
        unbiased = var * (n / (n - 1)) if n > 1 else var
        mom = params.momentum
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
    inv = 1.0 / np.sqrt(var + params.eps)
    return ((x - mean) * (inv * params.gamma) + params.beta).astype(
        np.result_type(x, params.gamma), copy=False
    )


def batch_norm_backward(grad: np.ndarray, x: np.ndarray, params: BatchNormParams, train: bool):
    """Return ``(grad_x, grad_gamma, grad_beta)``. Statistics are recomputed
    from ``x``; running statistics are not touched."""
    _check_grad(grad, x.shape)
    if train:
        mean, var = _bn_stats(x)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean) * inv
    g_beta = grad.sum(axis=(0, 1, 2))
    g_gamma = (grad * xhat).sum(axis=(0, 1, 2))
    if train:
        n = x.shape[0] * x.shape[1] * x.shape[2]
        gx = (params.gamma * inv / n) * (n * grad - g_beta - xhat * g_gamma)
    else:
        gx = grad * (params.gamma * inv)
    return gx.astype(np.result_type(x, grad), copy=False), g_gamma, g_beta


# --- activations and loss ----------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Subgradient 0 at ``x <= 0``."""
    _check_grad(grad, x.shape)
    return grad * (x > 0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=3, keepdims=True)


def softmax_channels_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    _check_grad(grad, x.shape)
    y = softmax_channels(x)
    return y * (grad - (grad * y).sum(axis=3, keepdims=True))


def _check_labels(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.shape != pred.shape[:3]:
        raise ShapeMismatchError(f"label grid {labels.shape} vs prediction {pred.shape[:3]}")
    if labels.size and (labels.min() < 0 or labels.max() >= pred.shape[3]):
        raise ValueError(
            f"labels must lie in [0, {pred.shape[3]}), found [{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.intp, copy=False)


def _picked(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.take_along_axis(pred, labels[..., None], axis=3)[..., 0]


def cross_entropy_loss(pred: np.ndarray, labels) -> float:
    """Mean over voxels of ``-log(max(p[label], 1e-12))``. ``labels`` is an
    integer grid (or anything with a ``labels`` attribute)."""
    labels = _check_labels(pred, labels)
    p = np.maximum(_picked(pred, labels), PROB_FLOOR)
    return float(-np.log(p.astype(np.float64)).mean())


def cross_entropy_backward(pred: np.ndarray, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` w.r.t. the probabilities.
    Zero where the clamp is active."""
    labels = _check_labels(pred, labels)
    n = labels.size
    p = _picked(pred, labels)
    g = np.zeros_like(pred)
    vals = np.where(p > PROB_FLOOR, -1.0 / (n * np.maximum(p, PROB_FLOOR)), 0.0)
    np.put_along_axis(g, labels[..., None], vals[..., None].astype(g.dtype), axis=3)
    return g


def softmax_cross_entropy_backward(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the loss w.r.t. the logits fed to the softmax:
    ``(probs - onehot) / voxel_count``."""
    labels = _check_labels(probs, labels)
    g = probs.copy()
    idx = labels[..., None]
    np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=3) - 1, axis=3)
    return g / labels.size


# --- trilinear resampling ----------------------------------------------------------


def resample_extent(n: int, factor) -> int:
    out = math.floor(n * Fraction(factor))
    if out < 1:
        raise ValueError(f"resampling extent {n} by {factor} gives {out} voxels")
    return out


def interpolation_matrix(n_in: int, n_out: int) -> sp.csr_matrix:
    """Sparse ``(n_out, n_in)`` linear-interpolation operator, half-voxel
    aligned (voxel ``i`` centred at ``(i + 0.5) / n``) with edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1 - f, f])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _apply_axis(x: np.ndarray, mat, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    res = np.asarray(mat @ flat, dtype=x.dtype)
    return np.moveaxis(res.reshape(mat.shape[0], *moved.shape[1:]), 0, axis)


def _target_size(spatial, size, factor):
    if size is not None:
        size = tuple(int(s) for s in size)
    else:
        if factor is None:
            raise ValueError("give either size or factor")
        factors = factor if isinstance(factor, (tuple, list)) else (factor,) * 3
        size = tuple(resample_extent(n, f) for n, f in zip(spatial, factors))
    if len(size) != 3 or min(size) < 1:
        raise ValueError(f"invalid target extents {size}")
    return size


def trilinear_resample(x: np.ndarray, size: Sequence[int] | None = None,
                       factor=None) -> np.ndarray:
    """Resample the spatial axes to ``size`` (or ``floor(extent * factor)``).
    Channels are interpolated independently."""
    sx = shape4(x)
    size = _target_size(sx.spatial, size, factor)
    y = x
    for axis, (n_in, n_out) in enumerate(zip(sx.spatial, size)):
        if n_in != n_out:
            y = _apply_axis(y, interpolation_matrix(n_in, n_out), axis)
    return np.ascontiguousarray(y) if y is not x else x.copy()


def trilinear_resample_backward(grad: np.ndarray, x_shape: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`trilinear_resample` from an input of shape ``x_shape``."""
    x_shape = tuple(x_shape)
    if grad.shape[3] != x_shape[3]:
        raise ShapeMismatchError(f"gradient channels {grad.shape[3]} vs input {x_shape[3]}")
    g = grad
    for axis, (n_in, n_out) in enumerate(zip(x_shape[:3], grad.shape[:3])):
        if n_in != n_out:
            g = _apply_axis(g, interpolation_matrix(n_in, n_out).T.tocsr(), axis)
    return np.ascontiguousarray(g)


# --- dispatch ------------------------------------------------------------------------

_BACKWARD = {
    conv3d: conv3d_backward,
    depthwise_conv3d: depthwise_conv3d_backward,
    pointwise_conv3d: pointwise_conv3d_backward,
    batch_norm: batch_norm_backward,
    relu: relu_backward,
    softmax_channels: softmax_channels_backward,
}


def gradient(op, upstream: np.ndarray, *inputs, **kwargs):
    """Look up and run the backward function of ``op``.

    ``trilinear_resample`` and the loss have their own signatures and are
    called directly.
    """
    try:
        back = _BACKWARD[op]
    except KeyError:
        raise ValueError(f"no backward registered for {getattr(op, '__name__', op)}") from None
    return back(upstream, *inputs, **kwargs)
