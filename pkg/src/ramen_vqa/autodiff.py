"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive records one node on the active tape: its inputs, its output
and a closure mapping the output gradient to input gradients. ``backward``
replays the tape in reverse, accumulating into ``Tensor.grad`` in tape order,
so a fixed program always produces bit-identical gradients.

There is no implicit broadcasting. Shapes must match exactly; use
``broadcast`` (or ``broadcast_row``) to tile explicitly.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: shape mismatch {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all map onto recorded primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications (inputs precede outputs)."""

    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> None:
        node.output._tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False


_default_tape = Tape()
_tape_stack: list[Tape] = []
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tape_stack[-1] if _tape_stack else _default_tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


def _make(kind: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    needs = _grad_enabled[0] and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = needs
    out._tape = None
    if needs:
        current_tape().record(Node(kind, inputs, out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise ValueError("backward: loss was not produced on a tape")
    idx = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].output is loss:
            idx = i
            break
    if idx is None:
        raise ValueError("backward: loss not found on its tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: idx + 1]):
        g = node.output.grad
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad = t.grad + gi
    if tape is _default_tape:
        tape.clear()


# ---------------------------------------------------------------- primitives

def _same(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(kind, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same("subtract", a, b)
    return _make("subtract", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same("multiply", a, b)
    ad, bd = a.data, b.data
    return _make("multiply", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same("divide", a, b)
    ad, bd = a.data, b.data
    return _make("divide", (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", (a, b), ad @ bd, bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", (a,), np.swapaxes(a.data, -1, -2),
                 lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                for i in range(len(tensors))]

    return _make("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), bw)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice[{start}:{stop}, axis={axis}]", a.shape)
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("slice", (a,), a.data[index].copy(), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape->{shape}", a.shape) from None
    src = a.shape
    return _make("reshape", (a,), out, lambda g: (g.reshape(src),))


def broadcast(a: Tensor, n: int, axis: int = 0) -> Tensor:
    """Tile ``a`` ``n`` times along a new axis inserted at ``axis``."""
    if n < 1:
        raise ShapeError(f"broadcast(n={n})", a.shape)
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _make("broadcast", (a,), out, lambda g: (g.sum(axis=ax),))


def broadcast_row(v: Tensor, n: int) -> Tensor:
    """Tile a length-d vector into an n x d matrix."""
    if v.ndim != 1:
        raise ShapeError("broadcast_row", v.shape)
    return broadcast(v, n, 0)


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _make("relu", (a,), np.where(m, a.data, 0.0), lambda g: (g * m,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", (a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)
    return _make("sqrt", (a,), s, lambda g: (g * 0.5 / s,))


def softmax(a: Tensor) -> Tensor:
    if a.ndim < 1:
        raise ShapeError("softmax", a.shape)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", (a,), s, bw)


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim < 1:
        raise ShapeError("log_softmax", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", (a,), out, bw)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        src = a.shape
        return _make("sum", (a,), np.asarray(a.data.sum()),
                     lambda g: (np.full(src, float(g)),))
    ax = axis % a.ndim
    n = a.shape[ax]
    return _make("sum", (a,), a.data.sum(axis=ax),
                 lambda g: (np.repeat(np.expand_dims(g, ax), n, axis=ax),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        src = a.shape
        return _make("mean", (a,), np.asarray(a.data.mean()),
                     lambda g: (np.full(src, float(g) / n),))
    ax = axis % a.ndim
    n = a.shape[ax]
    return _make("mean", (a,), a.data.mean(axis=ax),
                 lambda g: (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) by integer ids of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].ravel()[0]
        raise IndexError(f"embedding: index {bad} out of range for table with {v} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding", (table,), table.data[ids], bw)


# fixed name -> callable table so primitives can be applied by id
PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": mul,
    "scale": scale,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_,
    "transpose": transpose,
    "broadcast_row": broadcast_row,
    "broadcast": broadcast,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum_,
    "mean": mean,
    "embedding": embedding,
    "log": log,
    "sqrt": sqrt,
    "subtract": sub,
    "divide": div,
    "reshape": reshape,
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: dict      # parameter name -> max relative error over its entries
    tol: float
    eps: float

    @property
    def failures(self) -> list:
        return [k for k, v in self.max_rel_error.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _named(params) -> list:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Relative error per entry is |a - n| / max(1, |a|, |n|).
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    with Tape():
        loss = f()
        if loss.requires_grad:
            backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named
    }

    errors = {}
    with no_grad():
        for name, p in named:
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
            errors[name] = float((np.abs(a - num) / denom).max()) if flat.size else 0.0
    for _, p in named:
        p.grad = None
    return GradCheckReport(errors, tol, eps)
