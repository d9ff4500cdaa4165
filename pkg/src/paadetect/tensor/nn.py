"""Fused primitives used by the encoder, the losses and the attacks."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DegenerateInputError, DimensionError, Function, Tensor, as_tensor
from . import ops

__all__ = [
    "EPS_NORM",
    "EPS_BN",
    "BN_MOMENTUM",
    "softmax_axis",
    "log_softmax",
    "cross_entropy",
    "l2_normalize",
    "BatchNormState",
    "batch_norm",
    "conv1d",
    "conv2d",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "rel_gather",
    "rel_scatter",
]

EPS_NORM = 1e-12
EPS_BN = 1e-5
BN_MOMENTUM = 0.1


class _Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=axis, keepdims=True)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - np.sum(g * y, axis=ctx.axis, keepdims=True)),)


def softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    return _Softmax.apply(x, axis=axis % x.ndim)


class _LogSoftmax(Function):
    @staticmethod
    def forward(ctx, x, axis):
        z = x - np.max(x, axis=axis, keepdims=True)
        lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        out = z - lse
        ctx.save(out=out, axis=axis)
        return out

    @staticmethod
    def backward(ctx, g):
        sm = np.exp(ctx.out)
        return (g - sm * np.sum(g, axis=ctx.axis, keepdims=True),)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return _LogSoftmax.apply(x, axis=axis % x.ndim)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits`` (N x K) against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = ops.getitem(lp, (np.arange(labels.shape[0]), labels))
    if reduction == "none":
        return -picked
    if reduction == "sum":
        return -ops.sum(picked)
    return -ops.mean(picked)


class _L2Normalize(Function):
    @staticmethod
    def forward(ctx, x, axis):
        norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
        y = x / norm
        ctx.save(y=y, norm=norm, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return ((g - y * np.sum(g * y, axis=ctx.axis, keepdims=True)) / ctx.norm,)


def l2_normalize(v, axis: int = -1) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean norm.

    Raises :class:`DegenerateInputError` if any vector has norm <= ``EPS_NORM``.
    """
    v = as_tensor(v)
    norms = np.sqrt(np.sum(np.square(v.data, dtype=np.float64), axis=axis))
    if np.any(~(norms > EPS_NORM)):
        raise DegenerateInputError("l2_normalize received a (near-)zero vector")
    return _L2Normalize.apply(v, axis=axis % v.ndim)


# -- batch normalisation -------------------------------------------------------


class BatchNormState:
    """Running statistics of one batch-norm layer (mutated in train mode)."""

    __slots__ = ("mean", "var", "momentum")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def _bn_axes(ndim: int) -> tuple[int, ...]:
    return (0,) + tuple(range(2, ndim))


def _bcast(p: np.ndarray, ndim: int) -> np.ndarray:
    return p.reshape((1, -1) + (1,) * (ndim - 2))


class _BatchNormTrain(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        axes = _bn_axes(x.ndim)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        ctx.save(xhat=xhat, inv_std=inv_std, gamma=gamma, axes=axes,
                 mean=mean.reshape(-1), var=var.reshape(-1), n=x.size // x.shape[1])
        return xhat * _bcast(gamma, x.ndim) + _bcast(beta, x.ndim)

    @staticmethod
    def backward(ctx, g):
        xhat, axes = ctx.xhat, ctx.axes
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dx = None
        if ctx.needs[0]:
            dxhat = g * _bcast(ctx.gamma, g.ndim)
            n = ctx.n
            dx = (ctx.inv_std / n) * (
                n * dxhat
                - np.sum(dxhat, axis=axes, keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True)
            )
        return dx, dgamma, dbeta


class _BatchNormEval(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, mean, var, eps):
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - _bcast(mean, x.ndim)) * _bcast(inv_std, x.ndim)
        ctx.save(xhat=xhat, scale=_bcast(gamma * inv_std, x.ndim), axes=_bn_axes(x.ndim))
        return xhat * _bcast(gamma, x.ndim) + _bcast(beta, x.ndim)

    @staticmethod
    def backward(ctx, g):
        return g * ctx.scale, np.sum(g * ctx.xhat, axis=ctx.axes), np.sum(g, axis=ctx.axes)


def batch_norm(x, gamma, beta, state: BatchNormState | None, training: bool, eps: float = EPS_BN) -> Tensor:
    """Normalise over every axis except 1 (channels).

    Train mode uses batch statistics and updates ``state``; with a batch of a
    single sample it falls back to the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm parameters {gamma.shape}/{beta.shape} do not match input {x.shape}")
    if training and x.shape[0] > 1:
        out, ctx = _BatchNormTrain.apply_ctx(x, gamma, beta, eps=eps)
        if state is not None:
            m = state.momentum
            n = ctx.n
            unbiased = ctx.var * (n / max(n - 1, 1))
            state.mean[...] = (1 - m) * state.mean + m * ctx.mean
            state.var[...] = (1 - m) * state.var + m * unbiased
        return out
    if state is None:
        raise DimensionError("eval-mode batch_norm needs running statistics")
    return _BatchNormEval.apply(x, gamma, beta, mean=state.mean.astype(x.dtype),
                                var=state.var.astype(x.dtype), eps=eps)


# -- convolutions --------------------------------------------------------------


class _Conv1d(Function):
    @staticmethod
    def forward(ctx, x, w, stride, pad):
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
        k = w.shape[2]
        win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]  # B,C,L',k
        out = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # B,L',C'
        ctx.save(win=win, w=w, xshape=xp.shape, stride=stride, pad=pad)
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    @staticmethod
    def backward(ctx, g):
        gt = g.transpose(0, 2, 1)  # B,L',C'
        dw = np.tensordot(gt, ctx.win, axes=([0, 1], [0, 2])) if ctx.needs[1] else None
        dx = None
        if ctx.needs[0]:
            dwin = np.tensordot(gt, ctx.w, axes=([2], [0]))  # B,L',C,k
            dxp = np.zeros(ctx.xshape, dtype=g.dtype)
            s, lout = ctx.stride, g.shape[2]
            for j in range(ctx.w.shape[2]):
                dxp[:, :, j:j + s * (lout - 1) + 1:s] += dwin[:, :, :, j].transpose(0, 2, 1)
            p = ctx.pad
            dx = dxp[:, :, p:dxp.shape[2] - p] if p else dxp
        return dx, dw


def conv1d(x, w, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Cross-correlation of ``x`` (B x C x L) with ``w`` (C' x C x k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: input {x.shape}, weight {w.shape}")
    if w.shape[2] > x.shape[2] + 2 * pad or stride < 1:
        raise DimensionError(f"conv1d kernel {w.shape[2]} does not fit length {x.shape[2]} with pad {pad}")
    out = _Conv1d.apply(x, w, stride=int(stride), pad=int(pad))
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1))
    return out


class _Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, stride, pad):
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        kh, kw = w.shape[2], w.shape[3]
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,H',W',C'
        ctx.save(win=win, w=w, xshape=xp.shape, stride=stride, pad=pad)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        gt = g.transpose(0, 2, 3, 1)  # B,H',W',C'
        dw = np.tensordot(gt, ctx.win, axes=([0, 1, 2], [0, 2, 3])) if ctx.needs[1] else None
        dx = None
        if ctx.needs[0]:
            dwin = np.tensordot(gt, ctx.w, axes=([3], [0]))  # B,H',W',C,kh,kw
            dxp = np.zeros(ctx.xshape, dtype=g.dtype)
            s = ctx.stride
            ho, wo = g.shape[2], g.shape[3]
            for i in range(ctx.w.shape[2]):
                for j in range(ctx.w.shape[3]):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                        dwin[..., i, j].transpose(0, 3, 1, 2)
            p = ctx.pad
            dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp
        return dx, dw


class _Conv1x1(Function):
    @staticmethod
    def forward(ctx, x, w):
        b, c, h, wd = x.shape
        x3 = x.reshape(b, c, h * wd)
        w2 = w.reshape(w.shape[0], c)
        ctx.save(x3=x3, w2=w2, shape=x.shape, wshape=w.shape)
        return np.matmul(w2, x3).reshape(b, w.shape[0], h, wd)

    @staticmethod
    def backward(ctx, g):
        b, _, h, wd = ctx.shape
        g3 = g.reshape(b, g.shape[1], h * wd)
        dx = np.matmul(ctx.w2.T, g3).reshape(ctx.shape) if ctx.needs[0] else None
        dw = np.tensordot(g3, ctx.x3, axes=([0, 2], [0, 2])).reshape(ctx.wshape) if ctx.needs[1] else None
        return dx, dw


def conv2d(x, w, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation of ``x`` (B x C x H x W) with ``w`` (C' x C x kh x kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    if w.shape[2] > x.shape[2] + 2 * pad or w.shape[3] > x.shape[3] + 2 * pad or stride < 1:
        raise DimensionError(f"conv2d kernel {w.shape[2:]} does not fit input {x.shape[2:]} with pad {pad}")
    if w.shape[2] == w.shape[3] == 1 and stride == 1 and pad == 0:
        out = _Conv1x1.apply(x, w)
    else:
        out = _Conv2d.apply(x, w, stride=int(stride), pad=int(pad))
    if bias is not None:
        out = out + ops.reshape(bias, (1, -1, 1, 1))
    return out


# -- pooling -------------------------------------------------------------------


class _AvgPool2(Function):
    @staticmethod
    def forward(ctx, x, k):
        b, c, h, w = x.shape
        ctx.save(k=k, shape=x.shape)
        return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, g):
        k = ctx.k
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (up.astype(g.dtype, copy=False),)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"avg_pool2d({k}) needs spatial extents divisible by {k}, got {x.shape}")
    return _AvgPool2.apply(x, k=k)


class _MaxPool2(Function):
    @staticmethod
    def forward(ctx, x, k):
        b, c, h, w = x.shape
        blocks = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // k, w // k, k * k)
        idx = np.argmax(blocks, axis=-1)
        ctx.save(k=k, shape=x.shape, idx=idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        k = ctx.k
        b, c, h, w = ctx.shape
        blocks = np.zeros((b, c, h // k, w // k, k * k), dtype=g.dtype)
        np.put_along_axis(blocks, ctx.idx[..., None], g[..., None], axis=-1)
        dx = blocks.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(ctx.shape)
        return (dx,)


def max_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"max_pool2d({k}) needs spatial extents divisible by {k}, got {x.shape}")
    return _MaxPool2.apply(x, k=k)


def global_avg_pool(x) -> Tensor:
    return ops.mean(x, axis=(2, 3))


# -- relative-offset shifts ----------------------------------------------------


def _diagonal_view(x: np.ndarray) -> np.ndarray:
    """``(..., L, 2L-1)`` contiguous -> ``(..., L, L)`` view with ``v[..., i, j] = x[..., i, j - i + L - 1]``.

    Element ``(i, j)`` sits at flat offset ``L - 1 + i * (2L - 2) + j`` of each
    trailing block; those offsets are distinct, so the view may be written to.
    """
    length = x.shape[-2]
    item = x.itemsize
    base = x.reshape(-1)[length - 1:]
    lead_strides = x.strides[:-2]
    return np.lib.stride_tricks.as_strided(
        base, shape=x.shape[:-2] + (length, length),
        strides=lead_strides + ((2 * length - 2) * item, item), writeable=True)


class _RelGather(Function):
    @staticmethod
    def forward(ctx, x):
        x = np.ascontiguousarray(x)
        ctx.save(shape=x.shape)
        return _diagonal_view(x).copy()

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        _diagonal_view(out)[...] = g
        return (out,)


class _RelScatter(Function):
    @staticmethod
    def forward(ctx, x):
        length = x.shape[-1]
        out = np.zeros(x.shape[:-1] + (2 * length - 1,), dtype=x.dtype)
        _diagonal_view(out)[...] = x
        return out

    @staticmethod
    def backward(ctx, g):
        return (_diagonal_view(np.ascontiguousarray(g)).copy(),)


def rel_gather(x) -> Tensor:
    """``(..., L, 2L-1) -> (..., L, L)`` with ``out[..., i, j] = x[..., i, j - i + L - 1]``."""
    x = as_tensor(x)
    if x.shape[-1] != 2 * x.shape[-2] - 1:
        raise DimensionError(f"rel_gather needs (..., L, 2L-1), got {x.shape}")
    return _RelGather.apply(x)


def rel_scatter(x) -> Tensor:
    """Adjoint of :func:`rel_gather`: ``(..., L, L) -> (..., L, 2L-1)``, zero elsewhere."""
    x = as_tensor(x)
    if x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"rel_scatter needs (..., L, L), got {x.shape}")
    return _RelScatter.apply(x)
