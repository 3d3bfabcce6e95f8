"""A small float64 tensor with tape-based reverse-mode autodiff.

Operations executed while a :class:`Tape` is active are recorded in execution
order whenever one of their inputs requires a gradient. ``backward`` then walks
the tape in reverse and accumulates ``d loss / d leaf`` into ``leaf.grad``.
Gradients accumulate across calls until :func:`zero_grad` is used.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> backward(loss, tape)
    >>> w.grad
    array([4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = _frozen(arr)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def assign(self, values):
        """Replace the values in place (used by optimizers and checkpoint loading)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        self.data = _frozen(arr)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    Tapes are thread-local, so separate threads can train separate models.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        if id(loss) not in self._produced:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` of every requires-grad leaf in ``loss``'s ancestry."""
    tape.backward(loss)


def zero_grad(params):
    for p in params:
        p.grad = None


def apply_op(data, inputs: Sequence[Tensor], backward_fn):
    """Wrap ``data`` as the result of a differentiable op.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError("operation produced NaN or Inf")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = current_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return apply_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return apply_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return apply_op(a.data * s, (a,), lambda g: (g * s,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return apply_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return apply_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return apply_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return apply_op(y, (a,), lambda g: (g * y,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "silu": silu,
    "exp": exp,
}


def elementwise(kind: str, *operands):
    """Dispatch by name: ``elementwise("silu", x)``, ``elementwise("add", a, b)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# -- linear algebra / reductions -----------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching rules; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform") from None

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out, (a, b), grad)


def _check_axis(x, axis):
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {list(x.shape)}")
    return axis % x.ndim


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return apply_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(out, (x,), grad)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axis_n = _check_axis(x, axis)
    count = x.size if axis_n is None else x.shape[axis_n]
    return scale(sum_(x, axis_n, keepdims), 1.0 / count)


def reduce(x, kind: str, axis=None):
    if kind == "sum":
        return sum_(x, axis)
    if kind == "mean":
        return mean(x, axis)
    raise ValueError(f"unknown reduction {kind!r}")


# -- shape manipulation --------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}") from None
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return apply_op(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(tensors[0], axis)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[list(t.shape) for t in tensors]}") from None
    splits = np.cumsum(sizes)[:-1]
    return apply_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- optimisation --------------------------------------------------------------


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. ``None`` gradients are treated as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.assign(p.data - update)
    return params, state


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        zero_grad(self.params)


# -- randomness ----------------------------------------------------------------


class Context:
    """Owns the seeded 64-bit generator; ``spawn`` derives independent streams by key."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def spawn(self, *key: int) -> "Context":
        child = Context.__new__(Context)
        child.seed = self.seed
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        child.rng = np.random.Generator(np.random.PCG64(ss))
        return child

    def normal(self, shape):
        return self.rng.standard_normal(shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self.rng.uniform(low, high, shape)

    def integers(self, low, high, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self.rng.integers(low, high, size=size, endpoint=True)

    def permutation(self, n):
        return self.rng.permutation(n)


# -- finite-difference checking --------------------------------------------------


def numerical_gradient(fn, x: Tensor, h=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x``."""
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        x.assign(base)
        fp = fn().item()
        flat[i] = orig - h
        x.assign(base)
        fm = fn().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    x.assign(base)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, inputs: Sequence[Tensor], h=1e-4):
    """Largest relative error between tape gradients and central differences.

    ``fn`` takes no arguments and returns a scalar tensor built from ``inputs``.
    """
    zero_grad(inputs)
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        worst = max(worst, relative_error(analytic, numerical_gradient(fn, x, h)))
    return worst


__all__ = [
    "Adam",
    "AdamState",
    "Context",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "apply_op",
    "as_tensor",
    "backward",
    "concat",
    "current_tape",
    "elementwise",
    "exp",
    "gradcheck",
    "matmul",
    "mean",
    "mul",
    "numerical_gradient",
    "reduce",
    "relative_error",
    "reshape",
    "scale",
    "sigmoid",
    "silu",
    "softmax",
    "sub",
    "sum_",
    "swapaxes",
    "tanh",
    "zero_grad",
]
