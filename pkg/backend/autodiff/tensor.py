"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive is a ``Function`` subclass with a numpy ``forward`` and a local
gradient rule in ``backward``. A rule is recorded only when some operand
requires a gradient and grad mode is enabled.

Broadcasting rule (binary ops): shapes are aligned at their trailing axes;
missing leading axes count as length 1, and each aligned pair must be equal or
contain a 1. Any other pairing raises ``ShapeError`` naming the op and both
shapes.

GELU uses the tanh approximation
``0.5 * x * (1 + tanh(GELU_C * (x + GELU_K * x**3)))``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_GRAD_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError as error:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from error


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: Union[None, int, Sequence[int]], ndim: int, op: str) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"{op}: axis {a} out of range for rank {ndim}")
        out.append(int(a) % ndim)
    return tuple(sorted(set(out)))


class Function:
    """A recorded primitive application: operands plus a local gradient rule."""

    def __init__(self, *parents: "Tensor") -> None:
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None, _owned=True)


class Tensor:
    """Immutable dense float64 array that may take part in a gradient graph."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _ctx: Optional[Function] = None,
        name: Optional[str] = None,
        _owned: bool = False,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if arr is data and not _owned:
            arr = arr.copy()
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor: every axis must have length >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self.name = name

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, as_tensor(other))

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(as_tensor(other), self)

    def __getitem__(self, key: Any) -> "Tensor":
        return GetItem.apply(self, key=key)

    # Shape ops

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(int(s) for s in shape))

    def transpose(self, *axes: Any) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(int(a) for a in axes))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        a, b = a % self.ndim, b % self.ndim
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(int(s) for s in shape))

    # Reductions

    def sum(self, axis: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim, "mean")
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    # Elementwise

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def gelu(self) -> "Tensor":
        return Gelu.apply(self)

    # Gradients

    def backward(self, seed: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) · seed into ``leaf.grad`` for every leaf requiring grad."""
        Graph(self).backward(seed)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """Primitive applications reachable from ``output``, operands before users."""

    def __init__(self, output: Tensor) -> None:
        self.output = output
        self.nodes: List[Tensor] = _topological_order(output)

    def backward(self, seed: Optional[ArrayLike] = None, accumulate: bool = True) -> Dict[int, np.ndarray]:
        """Propagate ``seed`` to every leaf requiring grad.

        Returns the leaf gradients keyed by ``id(leaf)``; with ``accumulate`` they
        are also added into ``leaf.grad``.
        """
        out = self.output
        if seed is None:
            seed_arr = np.ones(out.shape, dtype=np.float64)
        else:
            seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed_arr.shape != out.shape:
            raise ShapeError(f"backward: seed shape {seed_arr.shape} does not match output shape {out.shape}")

        pending: Dict[int, np.ndarray] = {id(out): seed_arr}
        leaves: Dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    leaves[id(node)] = grad
                    if accumulate:
                        node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node._ctx.backward(grad)
            for parent, pgrad in zip(node._ctx.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pgrad if key in pending else pgrad
        return leaves


def _topological_order(output: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set = set()
    stack: List[Tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
    return order


def backward(output: Tensor, seed: Optional[ArrayLike] = None, inputs: Optional[Iterable[Tensor]] = None) -> List[Optional[np.ndarray]]:
    """Gradients of ``output`` (weighted by ``seed``) for each of ``inputs``.

    Inputs that do not require grad, or are unreachable, receive ``None``.
    Leaf ``.grad`` fields are left untouched.
    """
    leaves = Graph(output).backward(seed, accumulate=False)
    if inputs is None:
        return list(leaves.values())
    return [leaves.get(id(t)) for t in inputs]


# Binary elementwise


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.parents
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        broadcast_shape("sub", a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.parents
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        broadcast_shape("mul", a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.parents
        ga = _unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        broadcast_shape("div", a.shape, b.shape)
        return a / b

    def backward(self, grad):
        a, b = self.parents
        ga = _unbroadcast(grad / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-grad * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
        broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.parents
        ga = _unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape) if b.requires_grad else None
        return ga, gb


# Shape


class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError as error:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from error

    def backward(self, grad):
        return (grad.reshape(self.parents[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {a.shape}")
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        if broadcast_shape("broadcast", a.shape, shape) != tuple(shape):
            raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}")
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (_unbroadcast(grad, self.parents[0].shape),)


class GetItem(Function):
    def forward(self, a, key):
        self.key = key
        try:
            return np.array(a[key], dtype=np.float64)
        except IndexError as error:
            raise ShapeError(f"slice: invalid index {key!r} for shape {a.shape}") from error

    def backward(self, grad):
        full = np.zeros(self.parents[0].shape, dtype=np.float64)
        key = self.key if isinstance(self.key, tuple) else (self.key,)
        if all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in key):
            full[self.key] += grad
        else:
            np.add.at(full, self.key, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis):
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise ShapeError(f"concat: shapes {ref.shape} and {arr.shape} differ off axis {axis}")
        self.axis = ax
        self.sizes = [arr.shape[ax] for arr in arrays]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    if len(items) == 1:
        return items[0]
    return Concat.apply(*items, axis=axis)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    ndim = items[0].ndim + 1
    ax = axis % ndim
    expanded = [t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in items]
    return concat(expanded, axis=ax)


# Reductions


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axes = _normalize_axes(axis, a.ndim, "sum")
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims), dtype=np.float64)

    def backward(self, grad):
        shape = self.parents[0].shape
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, shape).copy(),)


# Elementwise unary


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Gelu(Function):
    def forward(self, a):
        self.inner = np.tanh(GELU_C * (a + GELU_K * a ** 3))
        return 0.5 * a * (1.0 + self.inner)

    def backward(self, grad):
        x = self.parents[0].data
        th = self.inner
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        return (grad * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)


class Softmax(Function):
    """Softmax along ``axis``; positions with ``mask == False`` get probability 0.

    Rows whose mask is entirely false return zeros.
    """

    def forward(self, a, axis, mask=None):
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
        self.axis = axis
        if mask is None:
            shifted = a - a.max(axis=axis, keepdims=True)
            e = np.exp(shifted)
            self.out = e / e.sum(axis=axis, keepdims=True)
            return self.out
        mask = np.asarray(mask, dtype=bool)
        if broadcast_shape("softmax", a.shape, mask.shape) != a.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} does not broadcast to {a.shape}")
        mask = np.broadcast_to(mask, a.shape)
        peak = np.where(mask, a, -np.inf).max(axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        e = np.exp(np.where(mask, a - peak, -np.inf))
        total = e.sum(axis=axis, keepdims=True)
        self.out = np.where(total > 0, e / np.where(total > 0, total, 1.0), 0.0)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)
