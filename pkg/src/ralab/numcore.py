"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Two layers:

* ``Tensor`` is a thin wrapper over a contiguous row-major numpy array
  (float32 or float64) whose arithmetic operators enforce strict shape
  equality.  There is no implicit broadcasting anywhere in this module;
  the only way to change a shape is an explicit op (``broadcast_to``,
  ``reshape``, ...).  Shape bugs fail loudly with both shapes named.

* ``Node`` wraps a value and participates in a define-by-run tape.  Every
  op below records a backward closure; ``backward(loss)`` walks the DAG
  once in reverse topological order and accumulates gradients into the
  ``grad`` buffer of each reachable parameter.

Forward evaluation is pure.  A single tape must only be walked by one
thread; disjoint graphs may be evaluated concurrently.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64
DEFAULT_DTYPE = F32

_NEG_INF_FILL = -1e30  # additive mask value; exp() underflows to exactly 0.0


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class DomainError(ValueError):
    """Operand values outside the mathematical domain of the op."""


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def _check_same_dtype(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"{op}: dtype {a.dtype} does not match dtype {b.dtype}")


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return np.ascontiguousarray(arr)


class Tensor:
    """Contiguous row-major n-dimensional float array.

    Arithmetic operators work elementwise on equal shapes only and return
    new tensors; matmul via ``@``.  Use the module-level ops on ``Node``
    for anything that needs gradients.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        self.data = _as_array(data, dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape: Sequence[int], dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.full(shape, value, dtype=dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def _binary(self, other, op: str, fn) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other, dtype=self.dtype)
        _check_same_shape(op, self.data, other.data)
        _check_same_dtype(op, self.data, other.data)
        return Tensor(fn(self.data, other.data))

    def __add__(self, other):
        return self._binary(other, "add", np.add)

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract)

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply)

    def __neg__(self):
        return Tensor(-self.data)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other, dtype=self.dtype)
        _check_matmul_shapes(self.data, other.data)
        return Tensor(np.matmul(self.data, other.data))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def _check_matmul_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul: batch dims of {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# autodiff tape
# --------------------------------------------------------------------------

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """A value in the computation DAG.

    ``value`` is the forward result, ``grad`` an accumulator of the same
    shape (populated by ``backward``), ``parents`` the producing inputs.
    Leaf parameters are created with ``parameter``; everything else comes
    out of the ops below.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None,
                 name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def value(self) -> Tensor:
        return Tensor(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item: node of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Node":
        return Node(self.data, requires_grad=False)

    # operator sugar; floats are allowed on mul/add for convenience
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.shape}, dtype={self.data.dtype.name}, req_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str | None = None, dtype=None) -> Node:
    """Create a trainable leaf node."""
    return Node(_as_array(data, dtype), requires_grad=True, name=name)


def constant(data, dtype=None) -> Node:
    """Create a non-trainable leaf node."""
    if isinstance(data, Node):
        return data
    if isinstance(data, Tensor):
        return Node(data.data if dtype is None else data.data.astype(dtype))
    return Node(_as_array(data, dtype))


def _coerce(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.data.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _make(out: np.ndarray, parents: tuple[Node, ...], backward: Callable) -> Node:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Node(out)
    return Node(out, requires_grad=True, parents=parents, backward=backward)


def custom_op(out: np.ndarray, parents: tuple["Node", ...], backward: Callable) -> "Node":
    """Record a hand-written op on the tape.

    ``backward(grad_out)`` must return one gradient array (or None) per
    parent.  Extension point for ops whose composed form would waste memory.
    """
    return _make(out, tuple(_coerce(p) for p in parents), backward)


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a: Node, b) -> Node:
    a, b = _coerce(a), _coerce(b, a)
    _check_same_shape("add", a.data, b.data)
    _check_same_dtype("add", a.data, b.data)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Node, b) -> Node:
    a, b = _coerce(a), _coerce(b, a)
    _check_same_shape("sub", a.data, b.data)
    _check_same_dtype("sub", a.data, b.data)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Node, b) -> Node:
    a, b = _coerce(a), _coerce(b, a)
    _check_same_shape("mul", a.data, b.data)
    _check_same_dtype("mul", a.data, b.data)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Node) -> Node:
    a = _coerce(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Node, s: float) -> Node:
    a = _coerce(a)
    s = a.data.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Node, s: float) -> Node:
    a = _coerce(a)
    s = a.data.dtype.type(s)
    return _make(a.data + s, (a,), lambda g: (g,))


def recip(a: Node) -> Node:
    a = _coerce(a)
    if np.any(a.data == 0):
        raise DomainError("recip: operand contains exact zeros")
    out = 1.0 / a.data
    return _make(out.astype(a.data.dtype, copy=False), (a,), lambda g: (-g * out * out,))


def div(a: Node, b: Node) -> Node:
    return mul(a, recip(b))


def exp(a: Node) -> Node:
    a = _coerce(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise DomainError("log: operand contains non-positive values")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Node) -> Node:
    a = _coerce(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: operand contains negative values")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def square(a: Node) -> Node:
    a = _coerce(a)
    return _make(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


def tanh(a: Node) -> Node:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Node) -> Node:
    a = _coerce(a)
    out = _sigmoid_raw(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to inf and the quotient
    # correctly rounds to 0, so just silence the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a: Node) -> Node:
    a = _coerce(a)
    sig = _sigmoid_raw(a.data)
    out = a.data * sig
    return _make(out, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def softplus(a: Node) -> Node:
    a = _coerce(a)
    out = np.logaddexp(a.data.dtype.type(0), a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid_raw(a.data),))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _make(out, (a,), lambda g: (g * inside,))


def cast(a: Node, dtype) -> Node:
    """Change element precision; backward casts the gradient back."""
    a = _coerce(a)
    dt = np.dtype(dtype)
    if a.data.dtype == dt:
        return a
    src = a.data.dtype
    return _make(a.data.astype(dt), (a,), lambda g: (g.astype(src),))


# --------------------------------------------------------------------------
# contraction / shape ops
# --------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    a, b = _coerce(a), _coerce(b, a)
    _check_matmul_shapes(a.data, b.data)
    _check_same_dtype("matmul", a.data, b.data)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bwd)


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (si, so) in enumerate(zip(shape, g.shape)) if si != so)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


def bmul(a: Node, b: Node) -> Node:
    """Explicit broadcasting multiply (the fused form of broadcast_to + mul).

    Backward sums gradients over the broadcast axes of each operand.
    """
    a, b = _coerce(a), _coerce(b, a)
    _check_same_dtype("bmul", a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatchError(f"bmul: cannot broadcast {a.shape} and {b.shape}") from e
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return (_reduce_to_shape(g * b.data, ash), _reduce_to_shape(g * a.data, bsh))

    return _make(out, (a, b), bwd)


def badd(a: Node, b: Node) -> Node:
    """Explicit broadcasting add; backward sums over broadcast axes."""
    a, b = _coerce(a), _coerce(b, a)
    _check_same_dtype("badd", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatchError(f"badd: cannot broadcast {a.shape} and {b.shape}") from e
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return (_reduce_to_shape(g, ash), _reduce_to_shape(g, bsh))

    return _make(out, (a, b), bwd)


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    """The only shape-expanding op: explicit numpy-style broadcast."""
    a = _coerce(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeMismatchError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    in_shape = a.shape

    def bwd(g):
        grad = g
        extra = len(shape) - len(in_shape)
        if extra:
            grad = grad.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, (si, so) in enumerate(zip(in_shape, grad.shape)) if si != so)
        if keep:
            grad = grad.sum(axis=keep, keepdims=True)
        return (grad.reshape(in_shape),)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    a = _coerce(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    in_shape = a.shape
    return _make(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Node, axes: Sequence[int]) -> Node:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a: Node) -> Node:
    nd = _coerce(a).data.ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(a.data.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def reduce_mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    a = _coerce(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = [_coerce(n) for n in nodes]
    out = np.concatenate([n.data for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(nodes), bwd)


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [_coerce(n) for n in nodes]
    out = np.stack([n.data for n in nodes], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(p.squeeze(axis))
                     for p in np.split(g, len(nodes), axis=axis))

    return _make(out, tuple(nodes), bwd)


def slice_(a: Node, key) -> Node:
    """Basic (slice/int) indexing; backward scatters into a zero buffer."""
    a = _coerce(a)
    out = a.data[key]
    in_shape, dt = a.shape, a.data.dtype

    def bwd(g):
        buf = np.zeros(in_shape, dtype=dt)
        buf[key] = g
        return (buf,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def pad_axis(a: Node, axis: int, before: int, after: int) -> Node:
    """Zero-pad one axis."""
    a = _coerce(a)
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    n = a.shape[axis]
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(before, before + n)
    idx = tuple(idx)
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g[idx]),))


def cumsum(a: Node, axis: int) -> Node:
    a = _coerce(a)
    out = np.cumsum(a.data, axis=axis).astype(a.data.dtype, copy=False)

    def bwd(g):
        rev = np.flip(g, axis=axis)
        return (np.ascontiguousarray(np.flip(np.cumsum(rev, axis=axis), axis=axis)),)

    return _make(out, (a,), bwd)


def flip(a: Node, axis: int) -> Node:
    a = _coerce(a)
    out = np.ascontiguousarray(np.flip(a.data, axis=axis))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),))


def take_time(a: Node, idx: np.ndarray) -> Node:
    """Gather along axis 1 with a per-batch index matrix.

    ``a`` is [b, t, ...]; ``idx`` is int [b, t_out]; output [b, t_out, ...].
    Backward accumulates (indices may repeat).
    """
    a = _coerce(a)
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeMismatchError(f"take_time: index shape {idx.shape} incompatible with {a.shape}")
    brow = np.arange(a.shape[0])[:, None]
    out = a.data[brow, idx]
    in_shape, dt = a.shape, a.data.dtype

    def bwd(g):
        buf = np.zeros(in_shape, dtype=dt)
        np.add.at(buf, (brow, idx), g)
        return (buf,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def index_select(table: Node, idx: np.ndarray) -> Node:
    """Look rows of ``table`` [n, m] up along its last axis: out[n, *idx.shape].

    Used for learned relative-position bias tables; backward accumulates
    into repeated indices.
    """
    table = _coerce(table)
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"index_select: table must be 2-d, got {table.shape}")
    idx = np.asarray(idx)
    out = table.data[:, idx]
    n, m = table.shape
    dt = table.data.dtype

    def bwd(g):
        buf = np.zeros((n, m), dtype=dt)
        for row in range(n):
            np.add.at(buf[row], idx, g[row])
        return (buf,)

    return _make(np.ascontiguousarray(out), (table,), bwd)


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

def softmax_lastdim(x: Node, mask: np.ndarray | Tensor | None = None) -> Node:
    """Numerically stabilized softmax over the last axis.

    ``mask`` (optional, boolean, same shape) marks entries to keep; masked
    entries come out exactly 0 and rows must keep at least one entry.
    """
    x = _coerce(x)
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != x.shape:
            raise ShapeMismatchError(f"softmax: mask shape {m.shape} does not match {x.shape}")
        m = m.astype(bool)
        if not m.any(axis=-1).all():
            raise DomainError("softmax: some rows are fully masked")

    z = x.data
    if m is not None:
        z = np.where(m, z, _NEG_INF_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if m is not None:
        e = np.where(m, e, 0.0)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype, copy=False)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), bwd)


def log_softmax_lastdim(x: Node) -> Node:
    x = _coerce(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(x.data.dtype, copy=False)

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bwd)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable parameter.

    ``loss`` must be scalar.  Each node in the DAG is visited exactly once;
    repeated calls keep accumulating until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf parameter
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg.astype(p.data.dtype, copy=False)
            else:
                acc += pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# finite differences (verification oracle; keep independent of the tape)
# --------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[], Node], param: Node, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. one parameter.

    Perturbs ``param.data`` in place entry by entry; intended for float64
    graphs of modest size.
    """
    base = param.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray,
                        floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
