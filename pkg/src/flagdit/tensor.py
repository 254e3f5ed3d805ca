"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass.  Calling
``Fn.apply(*inputs)`` runs the forward pass on plain numpy arrays and, when
any input requires a gradient, links the output to a node holding the saved
context.  :meth:`Tensor.backward` walks the resulting graph once in reverse
topological order.

Values are stored as float32 by default.  Sums, means and normalization
statistics accumulate in float64 and cast back; matrix products run in the
operand dtype.  :func:`precision` switches the
default dtype, which the finite-difference oracles use to run in float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "ShapeError",
    "GradientError",
    "tensor",
    "parameter",
    "no_grad",
    "precision",
    "default_dtype",
    "matmul",
    "softmax_lastdim",
    "rms_norm",
    "concat",
    "embedding",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """``backward`` was called on something that is not a scalar loss."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on this thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Function | None = None
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(_lift(other, self)))

    def __rsub__(self, other):
        return Add.apply(_lift(other, self), Neg.apply(self))

    def __neg__(self):
        return Neg.apply(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=1.0 / float(other))
        raise TypeError("division is only supported by scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Slice.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def tanh(self):
        return Tanh.apply(self)

    def silu(self):
        return SiLU.apply(self)

    def square(self):
        return Mul.apply(self, self)

    # --- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls; call :meth:`zero_grad` (or
        ``Module.zero_grad``) to reset.
        """
        if grad is None:
            if self.data.size != 1:
                raise GradientError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    """Reverse topological order: each tensor precedes its parents."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            post.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    post.reverse()
    return post


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


class Function:
    """A recorded operation.

    Subclasses implement ``forward(*arrays, **kwargs) -> array`` and
    ``backward(grad) -> tuple`` with one entry (array or ``None``) per input.
    """

    parents: tuple[Tensor, ...]

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            fn.parents = inputs
            out.requires_grad = True
            out._node = fn
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return (a * factor).astype(a.dtype, copy=False)

    def backward(self, grad):
        return ((grad * self.factor).astype(grad.dtype, copy=False),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class SiLU(Function):
    def forward(self, a):
        self.a = a
        self.sig = 1.0 / (1.0 + np.exp(-a))
        return a * self.sig

    def backward(self, grad):
        s = self.sig
        return (grad * (s * (1.0 + self.a * (1.0 - s))),)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=a.dtype)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = a.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
        self.count = a.size // np.asarray(out).size
        return np.asarray(out, dtype=a.dtype)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return ((np.broadcast_to(grad, self.shape) / self.count).astype(grad.dtype),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class Slice(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Embedding(Function):
    def forward(self, table, ids):
        self.ids, self.rows = ids, table.shape
        return table[ids]

    def backward(self, grad):
        out = np.zeros(self.rows, dtype=grad.dtype)
        np.add.at(out, self.ids.reshape(-1), grad.reshape(-1, self.rows[-1]))
        return (out,)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; ids may have any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    fn = Embedding()
    out = Tensor(fn.forward(table.data, ids))
    if _grad_enabled() and table.requires_grad:
        fn.parents = (table,)
        out.requires_grad = True
        out._node = fn
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM instead of a broadcast loop over leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return _mm(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        ga = _mm(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast).

    A 2-D right operand is applied to every row of a batched left operand.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Softmax(Function):
    def forward(self, x, mask):
        if mask is not None and not mask.all():
            x = np.where(mask, x, -np.inf)
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)
        return self.out

    def backward(self, grad):
        y = self.out
        dot = (grad * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (grad - dot),)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the trailing axis.

    ``mask`` (broadcastable boolean, True = keep) removes entries by giving
    them a logit of -inf; each row must keep at least one entry.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty trailing dimension")
    return Softmax.apply(x, mask=mask)


class RMSNorm(Function):
    def forward(self, x, gain, eps):
        ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
        self.inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
        self.xhat = x * self.inv
        self.gain = gain
        return self.xhat * gain

    def backward(self, grad):
        xhat, inv = self.xhat, self.inv
        d = xhat.shape[-1]
        gx_hat = grad * self.gain
        proj = (gx_hat * xhat).sum(axis=-1, keepdims=True, dtype=np.float64) / d
        gx = inv * (gx_hat - xhat * proj.astype(xhat.dtype))
        ggain = _unbroadcast(grad * xhat, self.gain.shape)
        return gx, ggain


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the trailing axis."""
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match input {x.shape}")
    return RMSNorm.apply(x, gain, eps=eps)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-3,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64.

    With ``coords`` only those entries are estimated; the rest stay zero.
    """
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = coords if coords is not None else np.ndindex(*x.shape)
    for idx in it:
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out
