"""Dense float64 tensors with forward-mode and reverse-mode derivatives.

Three value kinds flow through the same primitive functions:

* plain ``numpy.ndarray``: evaluation only, no derivative bookkeeping;
* :class:`Tensor`: reverse mode, operations are recorded on the active
  :class:`Tape` and replayed backwards by :meth:`Tape.gradient`;
* :class:`Dual`: forward mode, each value carries a tangent of the same shape.

Code written against the primitive set (``+``, ``*``, ``@``, :func:`tanh`,
:func:`exp`, :func:`broadcast_to`, ``.sum``, slicing, :func:`concat`,
``.reshape``, ``.transpose``) therefore runs unchanged in all three modes.
Any other numpy function applied to a :class:`Tensor` or :class:`Dual` raises
:class:`UnregisteredPrimitive`.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "Dual",
    "UnregisteredPrimitive",
    "NonFiniteError",
    "tanh",
    "exp",
    "reciprocal",
    "matmul",
    "concat",
    "broadcast_to",
    "stop_gradient",
    "jvp",
    "grad",
    "value_and_grad",
    "value_of",
]


class UnregisteredPrimitive(TypeError):
    """Raised when a differentiable value reaches a function outside the primitive set."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


CHECK_FINITE = True

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------


class Tape:
    """Records primitive operations for one reverse pass.

    Use as a context manager; tensors created by primitives while the tape is
    active (and depending on a tensor with ``requires_grad``) are appended in
    evaluation order, so a reverse sweep over ``nodes`` is a valid
    topological order. A tape belongs to one thread and one evaluation.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def gradient(self, loss: "Tensor", params: Sequence["Tensor"]) -> list[np.ndarray]:
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


class Tensor:
    """Reverse-mode value. ``data`` is a float64 array of shape ``shape``."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __array__(self, *args, **kwargs):
        raise UnregisteredPrimitive("Tensor passed to a non-primitive numpy function")

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(other, _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (Tensor, Dual)):
            return self * reciprocal(other)
        return _mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return _transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)


def _record(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else _as_array(x)


def _add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _record(ad + bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)), "add")


def _neg(a):
    if isinstance(a, Dual):
        return -a
    if not isinstance(a, Tensor):
        return -_as_array(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def _matmul_t(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def vjp(g):
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), vjp, "matmul")


def _tanh_t(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _safe_exp(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(x)


def _exp_t(a: Tensor) -> Tensor:
    y = _safe_exp(a.data)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def _reciprocal_t(a: Tensor) -> Tensor:
    y = _finite(1.0 / a.data, "reciprocal")
    return _record(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(a.data[idx]), (a,), vjp, "slice")


def _broadcast_t(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def _concat_t(xs, axis: int) -> Tensor:
    datas = [_data(x) for x in xs]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate(datas, axis=axis), tuple(xs), vjp, "concat")


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


class Dual:
    """Forward-mode value: ``primal`` plus a ``tangent`` of equal shape.

    A tangent of ``None`` stands for an all-zero tangent and is never
    materialised, which keeps constant parameters cheap.
    """

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None) -> None:
        self.primal = _as_array(primal)
        if tangent is not None:
            tangent = _as_array(tangent)
            if tangent.shape != self.primal.shape:
                raise ValueError(f"tangent shape {tangent.shape} != primal shape {self.primal.shape}")
        self.tangent = tangent

    @property
    def shape(self) -> tuple:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    def tangent_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.primal) if self.tangent is None else self.tangent

    def __repr__(self) -> str:
        return f"Dual(shape={self.shape})"

    def __array__(self, *args, **kwargs):
        raise UnregisteredPrimitive("Dual passed to a non-primitive numpy function")

    def __add__(self, other):
        o = _dual(other)
        t = _tadd(_tb(self.tangent, self.shape, o.shape), _tb(o.tangent, o.shape, self.shape))
        return _mk_dual(self.primal + o.primal, t, "add")

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.primal, None if self.tangent is None else -self.tangent)

    def __sub__(self, other):
        return self + (-_dual(other))

    def __rsub__(self, other):
        return _dual(other) + (-self)

    def __mul__(self, other):
        o = _dual(other)
        t = _tadd(
            None if self.tangent is None else self.tangent * o.primal,
            None if o.tangent is None else self.primal * o.tangent,
        )
        return _mk_dual(self.primal * o.primal, t, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (Tensor, Dual)):
            return self * reciprocal(other)
        return self * (1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return Dual(np.array(self.primal[idx]), None if self.tangent is None else np.array(self.tangent[idx]))

    def sum(self, axis=None, keepdims: bool = False):
        return Dual(
            np.sum(self.primal, axis=axis, keepdims=keepdims),
            None if self.tangent is None else np.sum(self.tangent, axis=axis, keepdims=keepdims),
        )

    def mean(self, axis=None, keepdims: bool = False):
        n = self.primal.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        return Dual(self.primal.reshape(shape), None if self.tangent is None else self.tangent.reshape(shape))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes
        axes = tuple(axes) if axes else None
        return Dual(self.primal.transpose(axes), None if self.tangent is None else self.tangent.transpose(axes))


def _dual(x) -> Dual:
    if isinstance(x, Dual):
        return x
    if isinstance(x, Tensor):
        raise UnregisteredPrimitive("cannot mix Tensor and Dual values")
    return Dual(x)


def _tb(t, shape, other_shape):
    """Broadcast tangent ``t`` of a ``shape`` operand against ``other_shape``."""
    if t is None:
        return None
    out_shape = np.broadcast_shapes(shape, other_shape)
    return t if t.shape == out_shape else np.broadcast_to(t, out_shape)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _mk_dual(primal, tangent, op: str) -> Dual:
    _finite(primal, op)
    if tangent is not None:
        _finite(tangent, op)
        if tangent.shape != primal.shape:
            tangent = np.broadcast_to(tangent, primal.shape)
    return Dual(primal, tangent)


# ---------------------------------------------------------------------------
# mode-dispatching primitives
# ---------------------------------------------------------------------------


def _mode(*xs) -> str:
    if any(isinstance(x, Dual) for x in xs):
        if any(isinstance(x, Tensor) for x in xs):
            raise UnregisteredPrimitive("cannot mix Tensor and Dual values")
        return "dual"
    if any(isinstance(x, Tensor) for x in xs):
        return "tensor"
    return "array"


def matmul(a, b):
    mode = _mode(a, b)
    if mode == "tensor":
        return _matmul_t(a, b)
    if mode == "dual":
        a, b = _dual(a), _dual(b)
        t = _tadd(
            None if a.tangent is None else a.tangent @ b.primal,
            None if b.tangent is None else a.primal @ b.tangent,
        )
        return _mk_dual(a.primal @ b.primal, t, "matmul")
    return _as_array(a) @ _as_array(b)


def tanh(x):
    mode = _mode(x)
    if mode == "tensor":
        return _tanh_t(x)
    if mode == "dual":
        y = np.tanh(x.primal)
        return _mk_dual(y, None if x.tangent is None else (1.0 - y * y) * x.tangent, "tanh")
    return np.tanh(x)


def reciprocal(x):
    mode = _mode(x)
    if mode == "tensor":
        return _reciprocal_t(x)
    if mode == "dual":
        y = _finite(1.0 / x.primal, "reciprocal")
        return _mk_dual(y, None if x.tangent is None else -y * y * x.tangent, "reciprocal")
    return _finite(1.0 / _as_array(x), "reciprocal")


def exp(x):
    mode = _mode(x)
    if mode == "tensor":
        return _exp_t(x)
    if mode == "dual":
        y = _safe_exp(x.primal)
        return _mk_dual(y, None if x.tangent is None else y * x.tangent, "exp")
    return _finite(_safe_exp(_as_array(x)), "exp")


def broadcast_to(x, shape):
    shape = tuple(shape)
    mode = _mode(x)
    if mode == "tensor":
        return _broadcast_t(x, shape)
    if mode == "dual":
        return Dual(
            np.broadcast_to(x.primal, shape).copy(),
            None if x.tangent is None else np.broadcast_to(x.tangent, shape).copy(),
        )
    return np.broadcast_to(x, shape)


def concat(xs: Sequence, axis: int = -1):
    mode = _mode(*xs)
    if mode == "tensor":
        return _concat_t(list(xs), axis)
    if mode == "dual":
        ds = [_dual(x) for x in xs]
        prim = np.concatenate([d.primal for d in ds], axis=axis)
        if all(d.tangent is None for d in ds):
            return Dual(prim)
        tan = np.concatenate([d.tangent_or_zeros() for d in ds], axis=axis)
        return Dual(prim, tan)
    return np.concatenate([_as_array(x) for x in xs], axis=axis)


def stop_gradient(x):
    """Pass the value through; zero reverse-mode gradient and zero tangent."""
    if isinstance(x, Tensor):
        return Tensor(x.data)
    if isinstance(x, Dual):
        return Dual(x.primal)
    return x


def value_of(x) -> np.ndarray:
    """Plain array behind any value kind."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Dual):
        return x.primal
    return _as_array(x)


# ---------------------------------------------------------------------------
# user-facing transforms
# ---------------------------------------------------------------------------


def jvp(f: Callable, inputs: Sequence, directions: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Value and directional derivative of ``f`` at ``inputs`` along ``directions``.

    A direction of ``None`` marks an input as constant.
    """
    if len(inputs) != len(directions):
        raise ValueError("inputs and directions differ in length")
    duals = []
    for x, v in zip(inputs, directions):
        x = _as_array(x)
        if v is not None:
            v = _as_array(v)
            if v.shape != x.shape:
                raise ValueError(f"direction shape {v.shape} does not match input shape {x.shape}")
        duals.append(Dual(x, v))
    out = f(*duals)
    out = _dual(out)
    return out.primal, out.tangent_or_zeros()


def value_and_grad(f: Callable, params: Sequence) -> tuple[float, list[np.ndarray]]:
    """Scalar value of ``f(*params)`` and its gradient with respect to each param."""
    with Tape() as tape:
        leaves = [Tensor(p, requires_grad=True) for p in params]
        out = f(*leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        if out.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {out.shape}")
        grads = tape.gradient(out, leaves)
    return float(out.data.reshape(())), grads


def grad(f: Callable, params: Sequence) -> list[np.ndarray]:
    """Gradient of the scalar ``f(*params)`` with respect to each param."""
    return value_and_grad(f, params)[1]
