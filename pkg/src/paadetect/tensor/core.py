"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass with a numpy
``forward`` and ``backward``.  Applying a function while gradients are enabled
records a :class:`Node` on the output tensor; :func:`backward` walks those
nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "Node",
    "ComputationTape",
    "tensor",
    "as_tensor",
    "backward",
    "trace",
    "no_grad",
    "precision",
    "default_dtype",
    "is_grad_enabled",
    "DimensionError",
    "DegenerateInputError",
    "ContractError",
    "ConfigurationError",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies outside the operation's numeric domain."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination."""


class _State:
    # Shared across threads on purpose: PAA branches run on workers and must
    # see the caller's grad/precision settings.
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.lock = threading.Lock()


_STATE = _State()


def default_dtype() -> np.dtype:
    return _STATE.dtype


def is_grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype="float64"):
    """Switch the default floating dtype (``float64`` is the verification mode)."""
    prev = _STATE.dtype
    _STATE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _STATE.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        backward(self)

    # -- operators (implementations live in ops.py) -------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.kind == "f" else _STATE.dtype
    return Tensor(arr, dtype=dtype)


class Context:
    """Scratch space a Function uses to hand values from forward to backward."""

    __slots__ = ("saved", "needs")

    def __init__(self) -> None:
        self.saved: dict[str, Any] = {}
        self.needs: tuple[bool, ...] = ()

    def __getattr__(self, key):
        try:
            return self.saved[key]
        except KeyError:
            raise AttributeError(key) from None

    def save(self, **values) -> None:
        self.saved.update(values)


@dataclass(eq=False)
class Node:
    fn: type
    inputs: tuple
    ctx: Context
    kwargs: dict = field(default_factory=dict)


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` with one entry (or ``None``) per input.
    """

    @staticmethod
    def forward(ctx: Context, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        out, _ = cls.apply_ctx(*inputs, **kwargs)
        return out

    @classmethod
    def apply_ctx(cls, *inputs, **kwargs) -> tuple[Tensor, Context]:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.needs = tuple(t.requires_grad for t in tensors)
        data = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        track = _STATE.grad_enabled and any(ctx.needs)
        out = Tensor(data, requires_grad=track, dtype=np.asarray(data).dtype)
        if track:
            out._node = Node(cls, tensors, ctx, kwargs)
        return out, ctx


# ---------------------------------------------------------------------------
# tape construction and reverse sweep
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    fn: type
    inputs: tuple
    output: Tensor
    kwargs: dict


class ComputationTape:
    """Topologically ordered record of the primitives that produced a tensor."""

    def __init__(self, entries: list[TapeEntry], leaves: list[Tensor]):
        self.entries = entries
        self.leaves = leaves

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def is_topological(self) -> bool:
        produced = {id(t) for t in self.leaves}
        for entry in self.entries:
            for t in entry.inputs:
                if t._node is not None and id(t) not in produced:
                    return False
                if t._node is None:
                    produced.add(id(t))
            produced.add(id(entry.output))
        return True

    def replay(self) -> list[np.ndarray]:
        """Recompute every entry from the leaf values, in tape order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for entry in self.entries:
            args = [values.get(id(t), t.data) if t._node is not None else t.data for t in entry.inputs]
            ctx = Context()
            ctx.needs = tuple(t.requires_grad for t in entry.inputs)
            res = entry.fn.forward(ctx, *args, **entry.kwargs)
            values[id(entry.output)] = res
            outs.append(res)
        return outs


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in reversed(t._node.inputs):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
    return order


def trace(root: Tensor) -> ComputationTape:
    order = _toposort(root)
    entries = [
        TapeEntry(t._node.fn.__name__, t._node.fn, t._node.inputs, t, t._node.kwargs)
        for t in order
        if t._node is not None
    ]
    leaves = [t for t in order if t._node is None]
    return ComputationTape(entries, leaves)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves`` that are not on the path from the loss get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.fn.backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.fn.__name__} produced grad {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)
