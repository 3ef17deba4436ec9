"""Small reverse-mode autodiff engine over numpy float64 arrays.

A :class:`Tensor` wraps an ndarray and, when it takes part in a tracked
computation, remembers its operands together with a closure mapping the
output gradient to one gradient per operand. :class:`Tape` orders the graph
below a scalar result so that backward visits every node exactly once.

Only what a dense classifier and its losses need is provided. Binary
operators follow numpy broadcasting; gradients are summed back to the
operand shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # numpy should defer to our reflected operators (ndarray * Tensor)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: BackwardFn | None = _backward
        self.op = op

    # -- views ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every tracked node.

        ``self`` must be a scalar. Gradients add onto whatever is already
        stored, so call :meth:`zero_grad` (or :func:`zero_grads`) between
        independent passes.
        """
        if self.size != 1:
            raise ContractError(f"backward needs a scalar result, got shape {self.shape}")
        tape = Tape(self)
        grads = tape.run_backward()
        for node in tape.nodes:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


class Tape:
    """Tracked nodes below ``result`` in operands-first order.

    The list is produced by an iterative post-order walk, so each node
    appears once and after every node that produced one of its operands.
    """

    def __init__(self, result: Tensor):
        self.result = result
        self.nodes: list[Tensor] = _toposort(result)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Return ``{id(node): gradient}`` without touching ``.grad``."""
        if seed is None:
            seed = np.ones_like(self.result.data)
        grads: dict[int, np.ndarray] = {id(self.result): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return grads


def _toposort(root: Tensor) -> list[Tensor]:
    if not root.requires_grad:
        return [root]
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to ``wrt``, no side effects."""
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    for t in wrt:
        if not t.requires_grad:
            raise ContractError("gradient requested for an untracked tensor")
    grads = Tape(output).run_backward()
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# -- graph construction helpers ---------------------------------------------

def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), backward, "pow")


def relu(a) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, tanh, exp, log, scale, pow."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "relu": relu, "tanh": tanh,
        "exp": exp, "log": log, "scale": scale, "pow": power, "neg": neg,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- softmax family (all stabilised by max subtraction) ---------------------

def _lse(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def logsumexp(z) -> Tensor:
    """log Σ_k exp(z_k) over the last axis, keeping that axis (size 1)."""
    z = as_tensor(z)
    out = _lse(z.data)
    return _make(out, (z,), lambda g: (g * np.exp(z.data - out),), "logsumexp")


def _check_classes(z: Tensor, name: str) -> None:
    if z.ndim < 1 or z.shape[-1] < 2:
        raise ShapeError(f"{name}: last axis must hold >= 2 classes, got shape {z.shape}")


def log_softmax(z) -> Tensor:
    z = as_tensor(z)
    _check_classes(z, "log_softmax")
    out = z.data - _lse(z.data)

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), backward, "log_softmax")


def softmax(z) -> Tensor:
    z = as_tensor(z)
    _check_classes(z, "softmax")
    out = np.exp(z.data - _lse(z.data))

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), backward, "softmax")


def log1m_softmax(z) -> Tensor:
    """Entry (.., c) is log(1 - softmax(z)_c), evaluated without cancellation.

    1 - p_c equals the softmax mass of the other classes, so the log is the
    log-sum-exp of z with column c left out minus the full log-sum-exp.
    """
    z = as_tensor(z)
    _check_classes(z, "log1m_softmax")
    C = z.shape[-1]
    full = _lse(z.data)
    cols = []
    for c in range(C):
        keep = np.ones(C, dtype=bool)
        keep[c] = False
        cols.append(_lse(z.data, keep)[..., 0])
    rest = np.stack(cols, axis=-1)
    out = rest - full
    p = np.exp(z.data - full)

    def backward(g):
        # d log(1-p_c) / d z_k = q^(c)_k - p_k, q^(c) = softmax with class c removed
        gz = -g.sum(axis=-1, keepdims=True) * p
        for c in range(C):
            keep = np.ones(C, dtype=bool)
            keep[c] = False
            q = np.exp(np.where(keep, z.data - rest[..., c : c + 1], -np.inf))
            gz = gz + g[..., c : c + 1] * q
        return (gz,)

    return _make(out, (z,), backward, "log1m_softmax")
