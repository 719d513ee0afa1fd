"""Dense tensors and a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one operand requires a gradient.  Outside a tape every operation is
a plain numpy computation, which is how acting and evaluation run.

Broadcasting is deliberately limited to scalar <-> tensor.  Dense layers use
the fused :func:`dense` op for their bias instead of general broadcasting.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, DomainError, StateError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """A float64 array that may participate in a differentiation tape.

    ``requires_grad`` marks parameters (leaves) and every value computed from
    them on a tape.  ``node`` is the index of the producing tape node, or
    ``None`` for leaves and untracked values.
    """

    __slots__ = ("data", "requires_grad", "node", "tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the tape; never receives gradient."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of operations, consumed by one backward pass.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StateError("tape already consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            raise StateError("tape exited out of order")

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self.consumed:
            raise StateError("cannot record on a consumed tape")
        output.requires_grad = True
        output.node = len(self.nodes)
        output.tape = self
        self.nodes.append(_Node(tuple(inputs), output, backward))


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_record:
    """Temporarily suspend recording (e.g. to compute detached targets)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def _maybe_record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward)
    return out


class GradientMap(dict):
    """Mapping ``Tensor -> ndarray`` of gradients for leaf parameters."""

    def __getitem__(self, key):
        return dict.__getitem__(self, _Key(key))

    def get(self, key, default=None):
        return dict.get(self, _Key(key), default)

    def __contains__(self, key):
        return dict.__contains__(self, _Key(key))

    def _set(self, key, value):
        dict.__setitem__(self, _Key(key), value)

    def tensors(self):
        return [k.tensor for k in self.keys()]

    def items_by_tensor(self):
        return [(k.tensor, v) for k, v in dict.items(self)]


class _Key:
    __slots__ = ("tensor",)

    def __init__(self, tensor):
        self.tensor = tensor.tensor if isinstance(tensor, _Key) else tensor

    def __hash__(self):
        return id(self.tensor)

    def __eq__(self, other):
        return isinstance(other, _Key) and other.tensor is self.tensor


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse pass over ``tape`` from the scalar ``loss``.

    Returns gradients for every leaf tensor with ``requires_grad`` that the
    loss depends on.  The tape is consumed and cannot be reused.
    """
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node is None:
        raise ContractError("loss was not recorded on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads = GradientMap()
    nodes = tape.nodes
    for idx in range(loss.node, -1, -1):
        node = nodes[idx]
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None and t.tape is tape:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            elif t.node is None:
                prev = leaf_grads.get(t)
                leaf_grads._set(t, gi.copy() if prev is None else prev + gi)
    tape.nodes = []
    return leaf_grads


# ---------------------------------------------------------------- broadcasting

def _is_scalar_like(a: np.ndarray) -> bool:
    return a.size == 1


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or _is_scalar_like(a) or _is_scalar_like(b):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -------------------------------------------------------------- elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _maybe_record((a, b), a.data + b.data,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _maybe_record((a, b), a.data - b.data,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _maybe_record((a, b), ad * bd,
                         lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def affine(x, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with constant scalars."""
    x = as_tensor(x)
    return _maybe_record((x,), scale * x.data + shift, lambda g: (scale * g,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _maybe_record((x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _maybe_record((x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _maybe_record((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    e = np.exp(np.minimum(x.data, 0.0))
    return _maybe_record((x,), np.where(pos, x.data, e - 1.0), lambda g: (g * np.where(pos, 1.0, e),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    y = np.logaddexp(0.0, d)
    return _maybe_record((x,), y, lambda g: (g * _sigmoid(d),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _maybe_record((x,), y, lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if np.any(d <= 0):
        raise DomainError("log of non-positive entry")
    return _maybe_record((x,), np.log(d), lambda g: (g / d,))


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _maybe_record((x,), d * d, lambda g: (2.0 * g * d,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative entry")
    y = np.sqrt(x.data)
    return _maybe_record((x,), y, lambda g: (0.5 * g / y,))


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data == 0):
        raise DomainError("reciprocal of zero")
    y = 1.0 / x.data
    return _maybe_record((x,), y, lambda g: (-g * y * y,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _maybe_record((x,), np.abs(x.data), lambda g: (g * s,))


_UNARY = {
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "square": square,
    "elu": elu,
}


def elementwise(op: str, *operands, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Dispatch an elementwise op by tag.

    Tags: tanh, relu, softplus, exp, log, sigmoid, square, elu (unary);
    add, mul (binary); affine-scale (``scale * x + shift``).
    """
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](x)
    if op == "add":
        return add(*operands)
    if op == "mul":
        return mul(*operands)
    if op in ("affine-scale", "affine"):
        (x,) = operands
        return affine(x, scale, shift)
    raise ContractError(f"unknown elementwise op {op!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _maybe_record((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (k,) or (n, k); ``b`` has shape (m,)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or x.ndim not in (1, 2):
        raise DimensionError(f"dense: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _maybe_record((x, w), out, lambda g: (g @ wd.T, np.outer(xd, g) if xd.ndim == 1 else xd.T @ g))
    b = as_tensor(b)
    if b.shape != (wd.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match weight {w.shape}")
    out = out + b.data

    def back(g):
        gw = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return g @ wd.T, gw, gb

    return _maybe_record((x, w, b), out, back)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _maybe_record((x,), x.data.T, lambda g: (g.T,))


# ------------------------------------------------------------ structural ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _maybe_record((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    basic = _is_basic_index(idx)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _maybe_record((x,), np.array(x.data[idx]), back)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _maybe_record(ts, out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _maybe_record(ts, out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _maybe_record((x,), np.asarray(out), back)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return affine(tsum(x, axis), 1.0 / float(n))
