"""Dense float64 tensors with a tape-based reverse-mode gradient."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A non-finite value appeared at an op boundary."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise NumericError(f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}")
    return arr


class Tensor:
    """Row-major float64 array, optionally tracking gradients.

    Every op that touches a tensor with ``requires_grad`` records its parents
    and a closure mapping the output gradient to parent gradients. The graph is
    released after :meth:`backward`, so each forward pass owns its own tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph -----------------------------------------------------------
    @property
    def has_tape(self) -> bool:
        return self._grad_fn is not None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        if self._grad_fn is None:
            # leaves, constants and outputs whose tape an earlier backward freed
            raise TapeError("backward() called on a tensor with no recorded tape")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node._grad_fn is not None:
                node._parents = ()
                node._grad_fn = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


def _make(op: str, data: np.ndarray, parents: Iterable[Tensor], grad_fn) -> Tensor:
    _check_finite(op, data)
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    # rows-of-a-matrix broadcasting is the only kind the models need
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- ops ------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    return _make(
        "mul", A * B, (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _make("silu", x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * g * x,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    arrs = [t.data for t in tensors]
    ax = axis % arrs[0].ndim
    for t in tensors[1:]:
        if t.data.ndim != arrs[0].ndim or any(
            t.shape[d] != arrs[0].shape[d] for d in range(arrs[0].ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([a.shape[ax] for a in arrs])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=ax)

    return _make("concat", np.concatenate(arrs, axis=ax), tensors, grad_fn)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make("mean", np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping a trailing extent of 1."""
    shape = a.shape
    return _make("sum_rows", a.data.sum(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return _make("squared_error", diff * diff, (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff))


def mse(a: Tensor, b: Tensor) -> Tensor:
    return mean(squared_error(a, b))


def zeros_like(a: Tensor) -> Tensor:
    return Tensor(np.zeros_like(a.data))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "silu": silu,
    "tanh": tanh,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "reduce_mean": mean,
    "reduce_sum": sum_all,
    "squared_error": squared_error,
}


def forward_graph(program: Sequence[tuple], inputs: dict[str, Tensor]) -> Tensor:
    """Run a straight-line program and return the value of its last step.

    ``program`` is a list of ``(output_name, op_name, [input_names], kwargs?)``
    entries; names must be defined before use, so the program is acyclic by
    construction.
    """
    env = dict(inputs)
    out = None
    for step in program:
        name, op, args = step[0], step[1], step[2]
        kwargs = step[3] if len(step) > 3 else {}
        if op not in OPS:
            raise KeyError(f"unknown op {op!r}; known: {sorted(OPS)}")
        missing = [a for a in args if a not in env]
        if missing:
            raise KeyError(f"step {name!r}: undefined input(s) {missing}")
        if name in env:
            raise ValueError(f"step {name!r} rebinds an existing name")
        out = env[name] = OPS[op](*(env[a] for a in args), **kwargs)
    if out is None:
        raise ValueError("empty program")
    return out
