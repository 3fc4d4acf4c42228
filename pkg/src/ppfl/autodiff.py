"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the forecasting model are provided.
Operations are recorded on the active :class:`Tape` when at least one input
requires a gradient; outside a tape every primitive is a plain numpy call.

Example
-------
>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     loss = hadamard(x, x)
>>> tape.backward(loss)[x]
array(6.)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "affine",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "hadamard",
    "add",
    "sub",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "take",
    "scale",
    "sum",
    "primitive_forward",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    """Raised when primitive inputs have non-conforming shapes."""


def _dtype_of(data):
    return np.longdouble if getattr(data, "dtype", None) == np.longdouble else np.float64


class Tensor:
    """A float64 array that may participate in gradient recording.

    ``np.longdouble`` data is kept as is so that finite-difference oracles can
    evaluate the same code in extended precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype_of(data))
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_local = _TapeStack()


class Tape:
    """Ordered record of primitive applications.

    A tape is confined to the thread that entered it; concurrently training
    clients each hold their own.
    """

    _counter = 0
    _lock = threading.Lock()

    def __init__(self):
        with Tape._lock:
            Tape._counter += 1
            self.id = Tape._counter
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(.) to every leaf reachable from ``loss``.

        Returns a mapping from leaf tensors to their gradients. The tape is
        cleared afterwards.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward() called on an empty tape")
        if loss.tape_id != self.id:
            raise RuntimeError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        leaves = {}
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            node.grad = None
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None and id(parent) not in leaves:
                    # leaf grads are overwritten, never carried over from an earlier pass
                    leaves[id(parent)] = parent
                    parent.grad = pg
                elif parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        self.nodes = []
        return {leaf: leaf.grad for leaf in leaves.values()}


def backward(loss: Tensor) -> dict:
    """Run the backward pass on the tape that recorded ``loss``."""
    for tape in _local.stack:
        if tape.id == loss.tape_id:
            return tape.backward(loss)
    raise RuntimeError("loss is not attached to an active tape")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor(data)
    stack = _local.stack
    if stack and any(p.requires_grad for p in parents):
        tape = stack[-1]
        out.requires_grad = True
        out.tape_id = tape.id
        out._parents = parents
        out._backward = fn
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------


def affine(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    x = _as_tensor(x)
    W = _as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not conform to weight {W.shape}")
    out = x.data @ W.data.T
    parents = (x, W)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"affine: bias {b.shape} does not match weight {W.shape}")
        out = out + b.data
        parents = (x, W, b)
    xd, Wd = x.data, W.data

    def fn(g):
        gx = g @ Wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1]) if W.requires_grad else None
        if len(parents) == 3:
            return gx, gW, g2.sum(axis=0)
        return gx, gW

    return _record(out, parents, fn)


def linear(W: Tensor, x, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` over the FIRST axis of ``x``; ``W`` is (out, in).

    The column-vector twin of :func:`affine`, for feature-major activations
    of shape (in, ...).
    """
    x = _as_tensor(x)
    W = _as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[0] != W.shape[1]:
        raise ShapeError(f"linear: weight {W.shape} does not conform to input {x.shape}")
    xd, Wd = x.data, W.data
    x2 = xd.reshape(xd.shape[0], -1)
    out = Wd @ x2
    parents = (W, x)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out += b.data[:, None]
        parents = (W, x, b)
    out = out.reshape((W.shape[0],) + xd.shape[1:])

    def fn(g):
        g2 = g.reshape(g.shape[0], -1)
        gW = g2 @ x2.T if W.requires_grad else None
        gx = (Wd.T @ g2).reshape(xd.shape) if x.requires_grad else None
        if len(parents) == 3:
            return gW, gx, g2.sum(axis=1)
        return gW, gx

    return _record(out, parents, fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * np.tanh(0.5 * x.data) + 0.5  # no overflow for large |x|
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors the primitive name
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"stack: incompatible shapes {shapes}") from None
    n = len(tensors)
    return _record(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} to {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes: tuple | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice ``a[start:stop]`` along ``axis``."""
    a = _as_tensor(a)
    shape = a.shape
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), fn)


_PRIMITIVES = {
    "affine": affine,
    "linear": linear,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax": softmax,
    "hadamard": hadamard,
    "add": add,
    "sub": sub,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "scale": scale,
    "sum": sum,
    "reshape": reshape,
    "take": take,
    "transpose": transpose,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    The array keeps an ``np.longdouble`` dtype if given one, in which case ``f``
    is evaluated in extended precision.
    """
    x = np.array(x, dtype=_dtype_of(x))
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
