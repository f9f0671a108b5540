"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a :class:`Node` on its output when at
least one input requires a gradient.  :func:`backward` walks the recorded graph
in reverse topological order (the :class:`Tape`) and accumulates gradients into
``Tensor.grad``.  Tensors that do not require gradients (for example frozen
backbone weights) never receive one, but gradients still flow through the
operations that consume them.
"""

from __future__ import annotations

from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from tame.errors import DomainError, GraphError, NumericError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    """Record of one executed operation: its inputs and how to push gradients back."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Args:
        data: Anything ``numpy.asarray`` accepts.  Integer input is promoted to
            float64; float32 input stays float32.
        requires_grad: Whether :func:`backward` should populate ``grad``.
        dtype: Optional explicit floating dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._node = Node(op, parents, backward) if out.requires_grad else None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def node(self) -> Optional[Node]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Share data with a new leaf that carries no graph and no gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def astype(self, dtype) -> "Tensor":
        return astype(self, dtype)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; python scalars adopt the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None and np.ndim(value) == 0 else None
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------- tape
class Tape:
    """Reverse-replayable record of the operations that produced ``root``.

    ``entries`` lists every tensor requiring a gradient that ``root`` depends on,
    ordered so that each tensor appears after all of its inputs.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.entries: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.entries.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in reversed(t._node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.entries)

    @property
    def operations(self) -> list[Node]:
        return [t._node for t in self.entries if t._node is not None]

    def replay(self, seed: np.ndarray) -> list[Node]:
        """Propagate ``seed`` from the root backwards; returns nodes in visit order."""
        _accumulate(self.root, seed)
        visited = []
        for t in reversed(self.entries):
            node = t._node
            if node is None or t.grad is None:
                continue
            visited.append(node)
            grads = node.backward(t.grad)
            for parent, g in zip(node.parents, grads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)
        return visited


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every tensor requiring a gradient that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires a gradient")
    tape = Tape(loss)
    tape.replay(np.ones_like(loss.data))
    return tape


# ----------------------------------------------------------------- helpers
def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    for axis, (x, y) in enumerate(zip(reversed(sa), reversed(sb))):
        if x != y and x != 1 and y != 1:
            raise ShapeError(
                f"{op}: cannot broadcast shapes {sa} and {sb} (axis -{axis + 1}: {x} vs {y})"
            )


def _binary_operands(a, b, op: str) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    _broadcast_shape(a, b, op)
    return a, b


# --------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def _bw(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def _bw(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def _bw(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def _bw(g):
        return (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data / b.data, (a, b), _bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("power only supports a constant exponent")
    p = float(exponent)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    out = a.data ** p

    def _bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), _bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign: exp never overflows and the negative tail stays nonzero
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function ``1 / (1 + exp(-x))``."""
    out = _logistic(a.data).astype(a.dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if not axes:
        return Tensor._result(a.data.copy(), (a,), lambda g: (g,), "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(np.asarray(out, dtype=a.dtype), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if not axes:
        return Tensor._result(a.data.copy(), (a,), lambda g: (g,), "mean")
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._result(np.asarray(out, dtype=a.dtype), (a,), _bw, "mean")


# ------------------------------------------------------------------ structure
def astype(a: Tensor, dtype) -> Tensor:
    """Differentiable dtype cast; the gradient is cast back to the input dtype."""
    src = a.dtype
    return Tensor._result(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not differentiable here."""
    out = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(out, copy=True), (a,), _bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (n, k) @ (k, m), got {a.shape} @ {b.shape}")

    def _bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return Tensor._result(a.data @ b.data, (a, b), _bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, _bw, "concat")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[n, index[n]]`` for every leading row ``n``."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if a.ndim < 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"take_rows: need one index per row of axis 0, got {index.shape[0]} for {a.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise ShapeError(f"take_rows: index out of range for axis 1 of size {a.shape[1]}")
    rows = np.arange(a.shape[0])

    def _bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return Tensor._result(a.data[rows, index].copy(), (a,), _bw, "take_rows")
