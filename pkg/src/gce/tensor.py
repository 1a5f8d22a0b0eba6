"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one operand requires a gradient. Outside a ``with Tape():`` block
nothing is recorded, which is what inference code relies on.

Broadcasting is limited to size-1 (scalar) operands against full tensors;
row-wise expansion is done explicitly with ``matmul`` against a ones column.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, IndexBoundsError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape))


@dataclass
class Node:
    """One recorded operation: ``vjp`` maps the output cotangent to input cotangents."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op, inputs, output, vjp) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def reset(self) -> None:
        self.nodes.clear()


_TAPES: list[Tape] = []


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    result = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _TAPES[-1].record(op, inputs, result, vjp)
    return result


# ---------------------------------------------------------------------------
# linear algebra and indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, vjp)


def scatter_add(src: Tensor, index, out_size: int) -> Tensor:
    """Sum rows of ``src`` into ``out_size`` buckets chosen by ``index``."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if src.data.ndim != 2:
        raise DimensionError(f"scatter_add: src must be 2-D, got shape {src.shape}")
    if src.shape[0] != index.shape[0]:
        raise DimensionError(
            f"scatter_add: src has {src.shape[0]} rows but index has length {index.shape[0]}"
        )
    bad = np.nonzero((index < 0) | (index >= out_size))[0]
    if bad.size:
        pos = int(bad[0])
        raise IndexBoundsError(
            f"scatter_add: index[{pos}]={int(index[pos])} outside [0, {out_size})"
        )
    out = np.zeros((out_size, src.shape[1]))
    np.add.at(out, index, src.data)

    def vjp(g):
        return (g[index],)

    return _emit("scatter_add", (src,), out, vjp)


def gather(src: Tensor, index) -> Tensor:
    """Select rows of ``src``; the adjoint of :func:`scatter_add`."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    n = src.shape[0]
    bad = np.nonzero((index < 0) | (index >= n))[0]
    if bad.size:
        pos = int(bad[0])
        raise IndexBoundsError(f"gather: index[{pos}]={int(index[pos])} outside [0, {n})")

    def vjp(g):
        out = np.zeros_like(src.data)
        np.add.at(out, index, g)
        return (out,)

    return _emit("gather", (src,), src.data[index], vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[a.shape for a in arrays]} along axis {axis}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc

    def vjp(g):
        return (g.reshape(old),)

    return _emit("reshape", (a,), out, vjp)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _emit("sum", (a,), np.array(a.data.sum()), vjp)


def mean(a: Tensor) -> Tensor:
    n = max(a.size, 1)
    return scale(sum(a), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array(g.sum()).reshape(shape)


def _operand(t: Tensor, other: Tensor) -> np.ndarray:
    # a size-1 operand is broadcast as a plain scalar; between two size-1
    # operands the one with more dimensions fixes the result shape
    if t.size == 1 and t.shape != other.shape:
        if other.size > 1 or len(other.shape) > len(t.shape):
            return t.data.reshape(())
        return t.data
    return t.data


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("add", a, b)
    out = _operand(a, b) + _operand(b, a)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("sub", a, b)
    out = _operand(a, b) - _operand(b, a)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("mul", a, b)
    A, B = _operand(a, b), _operand(b, a)

    def vjp(g):
        return _unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)

    return _emit("mul", (a, b), A * B, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("div", a, b)
    A, B = _operand(a, b), _operand(b, a)

    def vjp(g):
        return _unbroadcast(g / B, a.shape), _unbroadcast(-g * A / (B * B), b.shape)

    return _emit("div", (a, b), A / B, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _emit("scale", (a,), a.data * c, vjp)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.data, 0.0), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _emit("sqrt", (a,), out, vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _emit("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    x = a.data

    def vjp(g):
        return (g / x,)

    return _emit("log", (a,), np.log(x), vjp)


_UNARY = {"relu": relu, "tanh": tanh, "sqrt": sqrt, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    if kind in _UNARY:
        return _UNARY[kind](*operands)
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    if kind == "scale":
        return scale(*operands, **kwargs)
    raise ContractError(f"unknown elementwise op {kind!r}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B×C) against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    b = max(labels.shape[0], 1)
    loss = -logp[rows, labels].sum() / b

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (float(g) * p / b,)

    return _emit("softmax_cross_entropy", (logits,), np.array(loss), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; returns gradients of leaf tensors.

    The tape is reset afterwards, so each forward pass is differentiated once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    produced = {node.output.id for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = np.array(gi, dtype=np.float64).reshape(t.shape)
            if t.id not in produced:
                leaves[t.id] = t
    if not tape.nodes and loss.requires_grad:
        leaves[loss.id] = loss
    tape.reset()
    return {t: grads[i] for i, t in leaves.items()}


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-6
) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per entry is ``|a - c| / (|a| + |c| + 1e-12)``. A non-finite
    function value anywhere yields ``inf``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        return math.inf
    grads = backward(loss, tape)

    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape))
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f(params).item()
            flat[k] = orig - eps
            down = f(params).item()
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                return math.inf
            central = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
