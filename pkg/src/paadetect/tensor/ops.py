"""Elementwise, reduction, shape and contraction primitives."""

from __future__ import annotations

import numpy as np

from .core import DimensionError, Function, Tensor, as_tensor, unbroadcast

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "tanh",
    "relu", "sum", "mean", "max", "reshape", "transpose", "getitem", "take",
    "concat", "matmul", "einsum", "dot", "where",
]


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    if not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    return a, b


class _Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return unbroadcast(g, ctx.sa), unbroadcast(g, ctx.sb)


class _Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return unbroadcast(g, ctx.sa), unbroadcast(-g, ctx.sb)


class _Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = unbroadcast(g * b, a.shape) if ctx.needs[0] else None
        gb = unbroadcast(g * a, b.shape) if ctx.needs[1] else None
        return ga, gb


class _Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        out = a / b
        ctx.save(a=a, b=b, out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = unbroadcast(g / b, a.shape) if ctx.needs[0] else None
        gb = unbroadcast(-g * ctx.out / b, b.shape) if ctx.needs[1] else None
        return ga, gb


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype), dtype=ref.dtype)


def _binary(fn, a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _scalar_like(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _scalar_like(a, b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return fn.apply(a, b)


def add(a, b) -> Tensor:
    return _binary(_Add, a, b)


def sub(a, b) -> Tensor:
    return _binary(_Sub, a, b)


def mul(a, b) -> Tensor:
    return _binary(_Mul, a, b)


def div(a, b) -> Tensor:
    return _binary(_Div, a, b)


class _Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


def neg(a) -> Tensor:
    return _Neg.apply(a)


class _Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        ctx.save(a=a, p=exponent)
        return a ** exponent

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.p * ctx.a ** (ctx.p - 1),)


def power(a, exponent: float) -> Tensor:
    return _Pow.apply(a, exponent=float(exponent))


class _Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


def exp(a) -> Tensor:
    return _Exp.apply(a)


class _Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


def log(a) -> Tensor:
    return _Log.apply(a)


class _Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx.out,)


def sqrt(a) -> Tensor:
    return _Sqrt.apply(a)


class _Tanh(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * (1.0 - ctx.out * ctx.out),)


def tanh(a) -> Tensor:
    return _Tanh.apply(a)


class _Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask=mask)
        return np.where(mask, a, np.zeros((), a.dtype))

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx.mask, g, np.zeros((), g.dtype)),)


def relu(a) -> Tensor:
    return _Relu.apply(a)


# -- reductions ---------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class _Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=_norm_axis(axis, a.ndim), keepdims=keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        if not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


class _Max(Function):
    # gradient goes to the first maximal element only
    @staticmethod
    def forward(ctx, a, axis=-1, keepdims=False):
        idx = np.argmax(a, axis=axis)
        ctx.save(shape=a.shape, axis=axis % a.ndim, idx=idx, keepdims=keepdims)
        return np.max(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        if ctx.keepdims:
            g = np.squeeze(g, axis=ctx.axis)
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(ctx.idx, ctx.axis), np.expand_dims(g, ctx.axis), axis=ctx.axis)
        return (out,)


def max(a, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _Max.apply(a, axis=axis, keepdims=keepdims)


# -- shape --------------------------------------------------------------------


class _Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


def reshape(a, shape) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


class _Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(range(a.ndim))[::-1] if axes is None else axes
        ctx.save(inv=tuple(np.argsort(axes)))
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.transpose(g, ctx.inv)),)


def transpose(a, axes=None) -> Tensor:
    return _Transpose.apply(a, axes=None if axes is None else tuple(axes))


class _GetItem(Function):
    @staticmethod
    def forward(ctx, a, index):
        ctx.save(shape=a.shape, index=index)
        return np.array(a[index], copy=True)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.add.at(out, ctx.index, g)
        return (out,)


def getitem(a, index) -> Tensor:
    return _GetItem.apply(a, index=index)


class _Take(Function):
    @staticmethod
    def forward(ctx, a, indices):
        ctx.save(shape=a.shape, indices=indices)
        return np.take(a, indices, axis=0)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        flat_idx = ctx.indices.reshape(-1)
        np.add.at(out, flat_idx, g.reshape((flat_idx.size,) + ctx.shape[1:]))
        return (out,)


def take(a, indices) -> Tensor:
    """Gather rows of ``a`` (along axis 0) at integer ``indices`` of any shape."""
    return _Take.apply(a, indices=np.asarray(indices, dtype=np.int64))


class _Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(sizes=[x.shape[axis] for x in arrays], axis=axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        splits = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ctx.axis))


def concat(tensors, axis: int = 0) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


class _Where(Function):
    @staticmethod
    def forward(ctx, a, b, cond):
        ctx.save(cond=cond, sa=a.shape, sb=b.shape)
        return np.where(cond, a, b)

    @staticmethod
    def backward(ctx, g):
        zero = np.zeros((), g.dtype)
        return (unbroadcast(np.where(ctx.cond, g, zero), ctx.sa),
                unbroadcast(np.where(ctx.cond, zero, g), ctx.sb))


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    return _Where.apply(a, b, cond=np.asarray(cond, dtype=bool))


# -- contractions -------------------------------------------------------------


class _MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = gb = None
        if ctx.needs[0]:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if ctx.needs[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    return _MatMul.apply(a, b)


def dot(a, b) -> Tensor:
    """Inner product along the last axis (broadcast over the leading ones)."""
    return sum(mul(a, b), axis=-1)


class _Einsum(Function):
    @staticmethod
    def forward(ctx, a, b, spec):
        ins, out = spec.split("->")
        sa, sb = ins.split(",")
        ctx.save(a=a, b=b, sa=sa, sb=sb, so=out)
        return np.einsum(spec, a, b, optimize=True)

    @staticmethod
    def backward(ctx, g):
        ga = gb = None
        if ctx.needs[0]:
            ga = np.einsum(f"{ctx.so},{ctx.sb}->{ctx.sa}", g, ctx.b, optimize=True)
        if ctx.needs[1]:
            gb = np.einsum(f"{ctx.so},{ctx.sa}->{ctx.sb}", g, ctx.a, optimize=True)
        return ga, gb


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum.  Every operand index must appear in the output or the other operand."""
    spec = spec.replace(" ", "")
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        if len(set(mine)) != len(mine):
            raise DimensionError(f"repeated index in einsum operand {mine!r}")
        for ch in mine:
            if ch not in out and ch not in other:
                raise DimensionError(f"einsum index {ch!r} is summed inside one operand only")
    return _Einsum.apply(a, b, spec=spec)
