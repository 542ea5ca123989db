"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor.  ``Tensor.backward`` walks the recorded graph once in
reverse topological order and accumulates gradients into every tensor that
requires them.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "record",
    "no_grad",
    "grad_enabled",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "var",
    "amax",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "smooth_l1",
    "detach",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    ``data`` is treated as immutable once the tensor exists; only ``grad`` is
    mutated (by accumulation during ``backward``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "const"
        return t

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    # -- differentiation ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every ancestor ``t``
        that requires a gradient.  ``self`` must hold a single element unless
        an explicit output gradient is supplied."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"output gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------------
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

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def var(self, axes=None, keepdims=False):
        return reduce("var", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def detach(self):
        return detach(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "") -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward(g)`` receives the gradient w.r.t. the output and must return a
    sequence with one gradient (or ``None``) per parent.  Nothing is recorded
    when no parent requires a gradient or recording is disabled.
    """
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on long unrolled graphs
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _first_index(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                  "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    shape = _broadcast_shape(a, b)
    zero = np.broadcast_to(b.data == 0, shape)
    if zero.any():
        raise DomainError("division by zero", _first_index(zero))
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant real exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    if not p.is_integer():
        bad = a.data < 0 if p > 0 else a.data <= 0
        if bad.any():
            raise DomainError(f"power {p} of a negative operand", _first_index(bad))
    elif p < 0 and (a.data == 0).any():
        raise DomainError(f"power {p} of zero", _first_index(a.data == 0))
    out = a.data ** p
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of a negative operand", _first_index(a.data < 0))
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return record(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    bad = a.data <= 0
    if bad.any():
        raise DomainError("log of a non-positive operand", _first_index(bad))
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a named elementwise operation."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of a 2-D ``b``.

    Leading axes of ``a`` act as batch axes.  ``b`` may also carry the same
    leading batch axes as ``a`` (batched matrix product).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs a rank>=1 and b rank>=2, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"batched matmul needs equal leading axes: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), backward, "matmul")


# -- reductions ---------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if not axes:
        raise ValueError("reduction needs a non-empty axis set")
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def reduce(op: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``op`` in {sum, mean, var, max}.

    ``var`` is the biased (population) estimator.  ``max`` routes the
    gradient to the lowest-index maximiser.
    """
    x = _as_tensor(x)
    ax = _normalize_axes(axes, x.ndim)
    n = int(np.prod([x.shape[i] for i in ax]))

    if op == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)
        return record(out, (x,),
                      lambda g: (np.broadcast_to(_expand(g, ax, keepdims), x.shape).copy(),), "sum")
    if op == "mean":
        out = x.data.mean(axis=ax, keepdims=keepdims)
        return record(out, (x,),
                      lambda g: (np.broadcast_to(_expand(g, ax, keepdims) / n, x.shape).copy(),),
                      "mean")
    if op == "var":
        mu = x.data.mean(axis=ax, keepdims=True)
        centered = x.data - mu
        out = (centered * centered).mean(axis=ax, keepdims=keepdims)
        # the route through mu contributes sum(x - mu) = 0, leaving 2(x - mu)/n
        return record(out, (x,),
                      lambda g: (_expand(g, ax, keepdims) * 2.0 * centered / n,), "var")
    if op == "max":
        keep = [i for i in range(x.ndim) if i not in ax]
        moved = np.transpose(x.data, keep + list(ax))
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        arg = flat.argmax(axis=-1)  # first occurrence on ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, ax)

        def backward(g):
            gk = g.reshape(arg.shape)
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, arg[..., None], gk[..., None], axis=-1)
            mask = mask.reshape(moved.shape)
            return (np.transpose(mask, np.argsort(keep + list(ax))),)

        return record(out, (x,), backward, "max")
    raise ValueError(f"unknown reduction {op!r}")


def sum(x, axes=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", x, axes, keepdims)


def mean(x, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def var(x, axes=None, keepdims=False) -> Tensor:
    return reduce("var", x, axes, keepdims)


def amax(x, axes=None, keepdims=False) -> Tensor:
    return reduce("max", x, axes, keepdims)


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),),
                  "transpose")


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    n = len(ts)
    return record(out, ts,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- fused numerics -----------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return record(out, (x,),
                  lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _broadcast_shape(pred, target)
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    slope = np.where(small, d / beta, np.sign(d))

    def backward(g):
        return (_unbroadcast(g * slope, pred.shape), _unbroadcast(-g * slope, target.shape))

    return record(out, (pred, target), backward, "smooth_l1")


def detach(x) -> Tensor:
    """Same values, no history: gradients never flow back through the result."""
    x = _as_tensor(x)
    return Tensor._wrap(x.data)
