"""Differentiable kernels: matmul, 3-D convolution and pooling, dilated causal
1-D convolution, activations, softmax/cross-entropy, batch norm, dropout.

Spatio-temporal volumes are laid out ``N x C x T x H x W`` and every
3-tuple argument (kernel, stride, padding, window) is in ``(T, H, W)`` order.
"""
from __future__ import annotations

from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .tensor import DTYPE, Tensor, as_tensor

Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigError(f"expected an int or a 3-tuple, got {v}")
    return v


def out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# -- dense algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [N x in], ``weight`` [out x in]."""
    y = matmul(x, weight.T)
    return y + bias if bias is not None else y


# -- 3-D convolution ---------------------------------------------------------


def _window(offset: int, out: int, stride: int) -> slice:
    return slice(offset, offset + stride * (out - 1) + 1, stride)


def conv3d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an ``N x C x T x H x W`` volume with a
    ``C' x C x kT x kH x kW`` kernel; zero padding."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c = x.shape[:2]
    c_out, c_k = kernel.shape[:2]
    if c != c_k:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ksize = kernel.shape[2:]
    outs = tuple(out_extent(s, k, st, p) for s, k, st, p in zip(x.shape[2:], ksize, stride, padding))
    if min(outs) < 1:
        raise ConfigError(
            f"conv3d output extent {outs} is not positive for input {x.shape[2:]}, "
            f"kernel {ksize}, stride {stride}, padding {padding}"
        )
    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    w = kernel.data
    acc = np.zeros((n,) + outs + (c_out,), dtype=DTYPE)
    offsets = list(product(*(range(k) for k in ksize)))
    for a, b, cc in offsets:
        patch = xp[:, :, _window(a, outs[0], stride[0]), _window(b, outs[1], stride[1]), _window(cc, outs[2], stride[2])]
        acc += np.tensordot(patch, w[:, :, a, b, cc], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if kernel.requires_grad else None
        g_last = np.moveaxis(g, 1, -1)
        for a, b, cc in offsets:
            sl = (slice(None), slice(None), _window(a, outs[0], stride[0]),
                  _window(b, outs[1], stride[1]), _window(cc, outs[2], stride[2]))
            if gw is not None:
                gw[:, :, a, b, cc] = np.tensordot(g, xp[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if gx is not None:
                gx[sl] += np.moveaxis(np.tensordot(g_last, w[:, :, a, b, cc], axes=([4], [0])), -1, 1)
        if gx is not None:
            gx = gx[:, :, pt:pt + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
        return gx, gw

    return Tensor._make(out, (x, kernel), backward, "conv3d")


def edge_pad_time(x: Tensor, pad: int) -> Tensor:
    """Replicate the first/last frame ``pad`` times along axis 2 of a 5-D volume."""
    if pad == 0:
        return x
    t = x.shape[2]
    idx = np.concatenate([np.zeros(pad, dtype=int), np.arange(t), np.full(pad, t - 1)])

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(gx, (slice(None), slice(None), idx), g)
        return (gx,)

    return Tensor._make(x.data[:, :, idx], (x,), backward, "edge_pad_time")


# -- dilated causal 1-D convolution -------------------------------------------


def dilated_causal_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """``y[n, o, t] = sum_m sum_c kernel[o, c, m] * x[n, c, t - dilation*m]``.

    Taps that reach before the start of the sequence read zero, so the output
    has the same length as the input and never depends on future steps.
    """
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"causal conv expects N x C x T input and C' x C x k kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"causal conv channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    n, _, t = x.shape
    c_out, _, taps = kernel.shape
    xd, w = x.data, kernel.data
    out = np.zeros((n, c_out, t), dtype=DTYPE)
    for m in range(taps):
        shift = dilation * m
        if shift >= t:
            break
        out[:, :, shift:] += np.einsum("oc,nct->not", w[:, :, m], xd[:, :, : t - shift])

    def backward(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(w) if kernel.requires_grad else None
        for m in range(taps):
            shift = dilation * m
            if shift >= t:
                break
            if gw is not None:
                gw[:, :, m] = np.einsum("not,nct->oc", g[:, :, shift:], xd[:, :, : t - shift])
            if gx is not None:
                gx[:, :, : t - shift] += np.einsum("oc,not->nct", w[:, :, m], g[:, :, shift:])
        return gx, gw

    return Tensor._make(out, (x, kernel), backward, "causal_conv1d")


# -- pooling -------------------------------------------------------------------


def pool3d(x: Tensor, kind: str, window, stride=None, padding=0) -> Tensor:
    """Max or average pooling over the (T, H, W) axes.

    Max pooling pads with -inf and routes each output gradient to the first
    maximal element of its window (lowest flat index). Average pooling pads
    with zeros and always divides by the full window volume.
    """
    window = _triple(window)
    stride = _triple(stride if stride is not None else window)
    padding = _triple(padding)
    if kind not in ("max", "average"):
        raise ConfigError(f"unknown pool kind {kind!r}")
    if x.ndim != 5:
        raise ShapeError(f"pool3d expects a 5-D input, got {x.shape}")
    outs = tuple(out_extent(s, k, st, p) for s, k, st, p in zip(x.shape[2:], window, stride, padding))
    if min(outs) < 1:
        raise ConfigError(f"pool window {window} does not fit input extents {x.shape[2:]} with padding {padding}")
    pt, ph, pw = padding
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=fill)
    offsets = list(product(*(range(k) for k in window)))
    slices = [
        (slice(None), slice(None), _window(a, outs[0], stride[0]),
         _window(b, outs[1], stride[1]), _window(c, outs[2], stride[2]))
        for a, b, c in offsets
    ]
    volume = len(offsets)

    if kind == "average":
        out = np.zeros(x.shape[:2] + outs, dtype=DTYPE)
        for sl in slices:
            out += xp[sl]
        out /= volume
        argmax = None
    else:
        out = np.full(x.shape[:2] + outs, -np.inf, dtype=DTYPE)
        argmax = np.zeros(out.shape, dtype=np.int64)
        for i, sl in enumerate(slices):
            patch = xp[sl]
            better = patch > out
            out = np.where(better, patch, out)
            argmax[better] = i

    def backward(g):
        gx = np.zeros(xp.shape, dtype=DTYPE)
        if kind == "average":
            share = g / volume
            for sl in slices:
                gx[sl] += share
        else:
            for i, sl in enumerate(slices):
                gx[sl] += np.where(argmax == i, g, 0.0)
        return (gx[:, :, pt:pt + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]],)

    return Tensor._make(out, (x,), backward, f"{kind}_pool3d")


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to stay finite for large |d|
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown pointwise function {fn!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


_TINY = np.finfo(DTYPE).tiny


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class over the batch.

    ``probs`` is [N x K] (a single [K] row is accepted too); ``labels`` holds
    N class ids.
    """
    single = probs.ndim == 1
    p = probs.data[None, :] if single else probs.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = p.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range [0, {k}): {labels.tolist()}")
    rows = np.arange(n)
    picked = np.maximum(p[rows, labels], _TINY)
    loss = -np.log(picked).mean()

    def backward(g):
        gp = np.zeros_like(p)
        gp[rows, labels] = -g / (picked * n)
        return (gp[0] if single else gp,)

    return Tensor._make(np.asarray(loss), (probs,), backward, "cross_entropy")


# -- normalization and regularization ------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axes: Sequence[int] = (0, 2, 3, 4),
    training: bool = True,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over ``axes``; the remaining axis (channels) carries the
    affine ``gamma``/``beta`` and the running statistics.

    In training mode the batch statistics are used and the running buffers
    are updated in place: ``running = momentum*running + (1-momentum)*batch``.
    """
    axes = tuple(a % x.ndim for a in axes)
    bshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    count = int(np.prod([x.shape[a] for a in axes]))
    g_ = gamma.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(running_mean.shape)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(running_var.shape)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        gbeta = g.sum(axis=axes).reshape(beta.shape)
        gxhat = g * g_
        if training:
            gx = inv_std / count * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
