"""Dense-tensor reverse-mode automatic differentiation.

Define-by-run: every differentiable primitive records its inputs and a
backward closure on the output tensor, so the tape is implicit in the
graph of Tensor objects and is rebuilt on every forward pass.  All values
are float64; the ReLU derivative at exactly 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import conv1d_backward, conv1d_forward


class ShapeError(ValueError):
    """Raised when operation inputs do not conform to the shape rule."""


class UnknownOpError(ValueError):
    """Raised for an operation kind outside the supported set."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """N-dimensional float64 array participating in reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_inputs", "_bwd", "_op")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(values)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], None]] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __sub__(self, other):
        return add(self, mul(_lift(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, Tensor(-1.0)))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


# When set to a list, every ReLU-family site appends its minimum
# |pre-activation|, so callers can verify a gradient-check point is not
# near a kink.
KINK_TRACE: Optional[list] = None


def _trace_kink(data: np.ndarray) -> None:
    if KINK_TRACE is not None and data.size:
        KINK_TRACE.append(float(np.abs(data).min()))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str,
          bwd: Optional[Callable[[np.ndarray], None]]) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._bwd = bwd
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), "div", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), "matmul", bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over leading axis: (B,n,k) @ (B,k,m)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accumulate(a.data.transpose(0, 2, 1) @ g)

    return _make(data, (a, b), "bmm", bwd)


def relu(a: Tensor) -> Tensor:
    _trace_kink(a.data)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), "relu", bwd)


def squared_relu(a: Tensor) -> Tensor:
    pos = np.where(a.data > 0, a.data, 0.0)
    data = pos * pos

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * pos)

    return _make(data, (a,), "squared_relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), "sigmoid", bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), "tanh", bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), "log", bwd)


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(data, (a,), "sum_axis", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tensors, "concat", bwd)


def tslice(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    return _make(data, (a,), "slice", bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), "reshape", bwd)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), "transpose", bwd)


def softmax_axis(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            gy = g * data
            a._accumulate(gy - data * gy.sum(axis=axis, keepdims=True))

    return _make(data, (a,), "softmax_axis", bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        bad = int(np.argwhere((ids < 0) | (ids >= table.shape[0])).flat[0])
        raise ShapeError(
            f"embedding_lookup: id out of vocabulary at flat position {bad}")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return _make(data, (table,), "embedding_lookup", bwd)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor, direction: str) -> Tensor:
    """1-d convolution over axis -2 of (..., T, C_in) with hard causal padding.

    direction "forward": output t sees inputs <= t (zero left padding);
    direction "backward": output t sees inputs >= t.
    """
    if direction not in ("forward", "backward"):
        raise UnknownOpError(f"causal_conv1d: bad direction {direction!r}")
    xd = x.data if x.data.ndim == 3 else x.data[None]
    squeeze = x.data.ndim == 2
    if weight.data.ndim != 3 or xd.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"causal_conv1d: input {x.shape} vs weight {weight.shape}")
    data = conv1d_forward(xd, weight.data, bias.data, direction)
    if squeeze:
        data = data[0]

    def bwd(g):
        gb = g if g.ndim == 3 else g[None]
        gx, gw, gbias = conv1d_backward(xd, weight.data, gb, direction)
        if x.requires_grad:
            x._accumulate(gx[0] if squeeze else gx)
        if weight.requires_grad:
            weight._accumulate(gw)
        if bias.requires_grad:
            bias._accumulate(gbias)

    return _make(data, (x, weight, bias), "causal_conv1d", bwd)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    return mul(sum_axis(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# Public dispatch, reverse pass, gradient checking

_PUBLIC_KINDS = {
    "matmul": lambda inputs, attrs: matmul(inputs[0], inputs[1]),
    "add": lambda inputs, attrs: add(inputs[0], inputs[1]),
    "mul": lambda inputs, attrs: mul(inputs[0], inputs[1]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "squared_relu": lambda inputs, attrs: squared_relu(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "sum_axis": lambda inputs, attrs: sum_axis(
        inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 0)),
    "slice": lambda inputs, attrs: tslice(inputs[0], attrs["key"]),
    "causal_conv1d": lambda inputs, attrs: causal_conv1d(
        inputs[0], inputs[1], inputs[2], attrs.get("direction", "forward")),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(
        inputs[0], attrs["ids"]),
    "softmax_axis": lambda inputs, attrs: softmax_axis(
        inputs[0], axis=attrs.get("axis", -1)),
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply one of the supported differentiable operations by name."""
    if kind not in _PUBLIC_KINDS:
        raise UnknownOpError(f"unknown operation kind {kind!r}")
    return _PUBLIC_KINDS[kind](list(inputs), attrs or {})


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def reverse_accumulate(output: Tensor) -> dict[str, Tensor]:
    """Backpropagate from a scalar output; returns grads of named tensors.

    Gradients accumulate additively across repeated calls until zeroed.
    """
    if output.size != 1:
        raise ShapeError(
            f"reverse_accumulate: output must be scalar, got shape {output.shape}")
    order = _toposort(output)
    output._accumulate(np.ones_like(output.data))
    grads: dict[str, Tensor] = {}
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
        if node.name is not None and node.requires_grad and node.grad is not None:
            grads[node.name] = Tensor(node.grad)
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: Optional[tuple[str, int]] = None
    failure: Optional[str] = None

    def __bool__(self) -> bool:
        return self.passed


def finite_difference_check(fn: Callable[[], Tensor],
                            params: Sequence[Tensor],
                            step: float = 1e-5,
                            tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of `fn` with central finite differences.

    `fn` must be a deterministic scalar-valued closure over `params`.
    Relative error denominator is max(|a|, |b|, 1e-8).
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be > 0")
    for p in params:
        p.zero_grad()
    out = fn()
    if out.size != 1:
        raise ShapeError("finite_difference_check: fn must be scalar-valued")
    reverse_accumulate(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    max_rel = 0.0
    worst = None
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(fn().data)
            flat[i] = keep - step
            lo = float(fn().data)
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                name = p.name or f"param{pi}"
                return GradCheckReport(np.inf, False, (name, i),
                                       f"non-finite value at {name}[{i}]")
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[pi].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = (p.name or f"param{pi}", i)
    return GradCheckReport(max_rel, max_rel <= tolerance, worst)
