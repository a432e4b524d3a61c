"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive executed while it is active and whose
inputs require gradients.  ``tape.backward(loss)`` replays the record in
reverse and returns a map ``id(tensor) -> Tensor`` of total derivatives.  A
tape can be replayed once; record a fresh forward pass for the next step.

Broadcasting follows the trailing-dimension rule only: two operands are
compatible when their shapes are equal or one shape is a suffix of the other
(a 0-d tensor is a suffix of everything).  Size-1 stretching is rejected.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class TapeConsumed(RuntimeError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float_array = isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, tuple(reversed(range(self.ndim))))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, (np.ndarray, np.floating)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitives for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nesting
            stack.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        if self.consumed:
            raise TapeConsumed("tape already replayed; record a new forward pass")
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
        """Return total derivatives of scalar ``loss``.

        The result holds every leaf tensor with ``requires_grad`` seen on the
        tape, plus every tensor in ``wrt`` (zero when off the path).  Leaves
        also get their ``.grad`` attribute set.
        """
        if self.consumed:
            raise TapeConsumed("backward already run on this tape")
        if loss.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        keep = dict(leaves)
        for t in wrt or ():
            keep[id(t)] = t

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            if id(node.out) not in keep:
                del grads[id(node.out)]
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self.nodes = []

        out: dict[int, Tensor] = {}
        for key, t in keep.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            out[key] = Tensor(g)
            if key in leaves:
                t.grad = g
        return out


def primitive(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of a differentiable primitive.

    ``vjp(g)`` must return one gradient (or None) per input.  Nothing is
    recorded unless a tape is active and some input requires gradients.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape.record(out, tuple(inputs), vjp)
    return out


# ---------------------------------------------------------------- broadcasting

def broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeMismatch(f"shapes {a} and {b} are not trailing-dimension compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return primitive(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return primitive(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return primitive(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return primitive(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return primitive(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return primitive(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return primitive(out, (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    return primitive(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return primitive(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis for 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        return primitive(a.data @ b.data, (a, b),
                         lambda g: (g @ b.data.T, a.data.T @ g))
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"batched matmul shapes incompatible: {a.shape} @ {b.shape}")
        return primitive(np.matmul(a.data, b.data), (a, b),
                         lambda g: (np.matmul(g, b.data.transpose(0, 2, 1)),
                                    np.matmul(a.data.transpose(0, 2, 1), g)))
    raise ShapeMismatch(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------- reductions & views

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return primitive(np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.sum(a.data, axis=axes) / count

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), a.shape).copy(),)

    return primitive(np.asarray(out, dtype=a.dtype), (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return primitive(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return primitive(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return primitive(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    return tape.backward(loss, wrt)
