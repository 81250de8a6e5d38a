"""Tape-based reverse-mode differentiation over dense numpy arrays.

A :class:`Trace` records every primitive as it is evaluated (eager forward),
so node ids are already in topological order.  :meth:`Trace.backward` walks
the record once in reverse.

Shapes follow numpy conventions.  ``matmul`` broadcasts leading batch axes and
``add``/``sub``/``mul`` broadcast like numpy; gradients are summed back to the
input shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

KINDS = (
    "leaf",
    "const",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "relu",
    "gelu",
    "softplus",
    "rmsnorm",
    "sum",
    "sqnorm",
    "dot",
    "gather",
    "slice",
    "reshape",
    "transpose",
)

_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when the input shapes of a primitive do not conform."""

    def __init__(self, kind: str, *shapes: tuple[int, ...]):
        self.kind = kind
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


class Var:
    """Handle to a node of a trace; supports the usual arithmetic operators."""

    __slots__ = ("trace", "id")
    __array_priority__ = 1000

    def __init__(self, trace: "Trace", node_id: int):
        self.trace = trace
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.trace.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        node = self.trace.nodes[self.id]
        return f"Var(id={self.id}, kind={node.kind}, shape={self.shape})"

    def __add__(self, other):
        return self.trace.add(self, other)

    def __radd__(self, other):
        return self.trace.add(other, self)

    def __sub__(self, other):
        return self.trace.sub(self, other)

    def __rsub__(self, other):
        return self.trace.sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.trace.scale(self, float(other))
        return self.trace.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.trace.scale(self, -1.0)

    def __matmul__(self, other):
        return self.trace.matmul(self, other)

    def __rmatmul__(self, other):
        return self.trace.matmul(other, self)

    def __getitem__(self, index):
        return self.trace.slice(self, index)

    @property
    def T(self):
        return self.trace.transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.trace.reshape(self, shape)

    def sum(self, axis=None):
        return self.trace.sum(self, axis)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


class Trace:
    """Append-only record of primitive operations.

    ``dtype`` fixes the floating precision of every leaf and constant.  With
    ``debug=True`` each forward value is checked for NaN/Inf.
    """

    def __init__(self, dtype=np.float64, debug: bool = False):
        self.dtype = np.dtype(dtype)
        self.debug = debug
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    # -- recording -------------------------------------------------------
    def _record(self, kind, inputs, value, name=None, **attrs) -> Var:
        if self.debug and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {kind} (node {len(self.nodes)})")
        self.nodes.append(Node(kind, tuple(inputs), value, attrs, name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        arr = np.array(value, dtype=self.dtype)
        return self._record("leaf", (), arr, name=name)

    def const(self, value) -> Var:
        arr = np.asarray(value)
        if arr.dtype.kind == "f" or arr.dtype.kind == "b":
            arr = arr.astype(self.dtype)
        return self._record("const", (), arr)

    def _as_var(self, x) -> Var:
        if isinstance(x, Var):
            if x.trace is not self:
                raise ValueError("Var belongs to a different trace")
            return x
        return self.const(x)

    def op(self, kind: str, *inputs, **attrs) -> Var:
        """Generic entry point: ``trace.op("matmul", a, b)``."""
        if kind not in KINDS or kind in ("leaf", "const"):
            raise ValueError(f"unknown primitive kind: {kind!r}")
        return getattr(self, kind)(*inputs, **attrs)

    # -- primitives ------------------------------------------------------
    def matmul(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise ShapeError("matmul", av.shape, bv.shape)
        try:
            out = np.matmul(av, bv)
        except ValueError:
            raise ShapeError("matmul", av.shape, bv.shape) from None
        return self._record("matmul", (a.id, b.id), out)

    def add(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        _broadcast_shape("add", a.value, b.value)
        return self._record("add", (a.id, b.id), a.value + b.value)

    def sub(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        _broadcast_shape("sub", a.value, b.value)
        return self._record("sub", (a.id, b.id), a.value - b.value)

    def mul(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        _broadcast_shape("mul", a.value, b.value)
        return self._record("mul", (a.id, b.id), a.value * b.value)

    def scale(self, a, c: float) -> Var:
        a = self._as_var(a)
        c = float(c)
        return self._record("scale", (a.id,), a.value * self.dtype.type(c), c=c)

    def sigmoid(self, a) -> Var:
        a = self._as_var(a)
        return self._record("sigmoid", (a.id,), _sigmoid(a.value))

    def relu(self, a) -> Var:
        a = self._as_var(a)
        return self._record("relu", (a.id,), np.maximum(a.value, 0))

    def gelu(self, a) -> Var:
        """tanh-approximated GELU."""
        a = self._as_var(a)
        x = a.value
        t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        return self._record("gelu", (a.id,), 0.5 * x * (1.0 + t), t=t)

    def softplus(self, a) -> Var:
        a = self._as_var(a)
        return self._record("softplus", (a.id,), np.logaddexp(0, a.value))

    def rmsnorm(self, x, gain, eps: float = 1e-6) -> Var:
        """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
        x, gain = self._as_var(x), self._as_var(gain)
        if gain.value.shape != x.value.shape[-1:]:
            raise ShapeError("rmsnorm", x.value.shape, gain.value.shape)
        xv = x.value
        r = np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
        n = xv / r
        return self._record("rmsnorm", (x.id, gain.id), n * gain.value, r=r, n=n)

    def sum(self, a, axis=None) -> Var:
        a = self._as_var(a)
        return self._record("sum", (a.id,), np.asarray(np.sum(a.value, axis=axis)), axis=axis)

    def sqnorm(self, a) -> Var:
        a = self._as_var(a)
        return self._record("sqnorm", (a.id,), np.asarray(np.sum(a.value * a.value)))

    def dot(self, a, b) -> Var:
        """Contraction over the last axis (leading axes broadcast)."""
        a, b = self._as_var(a), self._as_var(b)
        if a.value.shape[-1:] != b.value.shape[-1:]:
            raise ShapeError("dot", a.value.shape, b.value.shape)
        _broadcast_shape("dot", a.value, b.value)
        return self._record("dot", (a.id, b.id), np.asarray(np.sum(a.value * b.value, axis=-1)))

    def gather(self, table, index) -> Var:
        """Row lookup: ``table[index]`` for an integer index array of any shape."""
        table = self._as_var(table)
        idx = np.asarray(index)
        if idx.dtype.kind not in "iu":
            raise TypeError("gather index must be integer")
        n = table.value.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"gather: index out of range for table with {n} rows")
        return self._record("gather", (table.id,), table.value[idx], index=idx)

    def slice(self, a, index) -> Var:
        a = self._as_var(a)
        return self._record("slice", (a.id,), a.value[index], index=index)

    def reshape(self, a, shape) -> Var:
        a = self._as_var(a)
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.value.shape, tuple(shape)) from None
        return self._record("reshape", (a.id,), out)

    def transpose(self, a) -> Var:
        """Swap the last two axes."""
        a = self._as_var(a)
        if a.value.ndim < 2:
            raise ShapeError("transpose", a.value.shape)
        return self._record("transpose", (a.id,), np.swapaxes(a.value, -1, -2))

    # -- reverse pass ----------------------------------------------------
    def backward(self, output: Var) -> dict[int, np.ndarray]:
        """Gradients of scalar ``output`` with respect to every leaf.

        Leaves the output does not depend on get zero arrays.
        """
        out = self._as_var(output)
        if out.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
        nodes = self.nodes
        grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
        for i in range(out.id, -1, -1):
            node = nodes[i]
            if node.kind in ("leaf", "const"):
                continue
            g = grads.pop(i, None)
            if g is None:
                continue
            for j, gj in zip(node.inputs, _VJP[node.kind](self, node, g)):
                if gj is None or nodes[j].kind == "const":
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        result = {}
        for i, node in enumerate(nodes):
            if node.kind == "leaf":
                result[i] = grads.get(i, np.zeros_like(node.value))
        return result

    def grad(self, output: Var, wrt: Mapping[str, Var]) -> dict[str, np.ndarray]:
        g = self.backward(output)
        return {k: g[v.id] for k, v in wrt.items()}


def _vjp_matmul(tr, node, g):
    a = tr.nodes[node.inputs[0]].value
    b = tr.nodes[node.inputs[1]].value
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _vjp_add(tr, node, g):
    a, b = (tr.nodes[i].value for i in node.inputs)
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(tr, node, g):
    a, b = (tr.nodes[i].value for i in node.inputs)
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_mul(tr, node, g):
    a, b = (tr.nodes[i].value for i in node.inputs)
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_scale(tr, node, g):
    return (g * g.dtype.type(node.attrs["c"]),)


def _vjp_sigmoid(tr, node, g):
    s = node.value
    return (g * s * (1.0 - s),)


def _vjp_relu(tr, node, g):
    x = tr.nodes[node.inputs[0]].value
    return (g * (x > 0),)


def _vjp_gelu(tr, node, g):
    x = tr.nodes[node.inputs[0]].value
    t = node.attrs["t"]
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _vjp_softplus(tr, node, g):
    x = tr.nodes[node.inputs[0]].value
    return (g * _sigmoid(x),)


def _vjp_rmsnorm(tr, node, g):
    gain = tr.nodes[node.inputs[1]].value
    r, n = node.attrs["r"], node.attrs["n"]
    dn = g * gain
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
    dgain = (g * n).reshape(-1, n.shape[-1]).sum(axis=0)
    return dx, dgain


def _vjp_sum(tr, node, g):
    a = tr.nodes[node.inputs[0]].value
    axis = node.attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _vjp_sqnorm(tr, node, g):
    a = tr.nodes[node.inputs[0]].value
    return (2.0 * g * a,)


def _vjp_dot(tr, node, g):
    a, b = (tr.nodes[i].value for i in node.inputs)
    ge = np.expand_dims(g, -1)
    return _unbroadcast(ge * b, a.shape), _unbroadcast(ge * a, b.shape)


def _vjp_gather(tr, node, g):
    table = tr.nodes[node.inputs[0]].value
    out = np.zeros_like(table)
    np.add.at(out, node.attrs["index"], g)
    return (out,)


def _vjp_slice(tr, node, g):
    a = tr.nodes[node.inputs[0]].value
    out = np.zeros_like(a)
    np.add.at(out, node.attrs["index"], g)
    return (out,)


def _vjp_reshape(tr, node, g):
    return (g.reshape(tr.nodes[node.inputs[0]].value.shape),)


def _vjp_transpose(tr, node, g):
    return (np.swapaxes(g, -1, -2),)


_VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "sigmoid": _vjp_sigmoid,
    "relu": _vjp_relu,
    "gelu": _vjp_gelu,
    "softplus": _vjp_softplus,
    "rmsnorm": _vjp_rmsnorm,
    "sum": _vjp_sum,
    "sqnorm": _vjp_sqnorm,
    "dot": _vjp_dot,
    "gather": _vjp_gather,
    "slice": _vjp_slice,
    "reshape": _vjp_reshape,
    "transpose": _vjp_transpose,
}


def grad_check(
    fn: Callable[[Trace, dict[str, Var]], Var],
    point: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Worst relative error between backward() and central differences.

    ``fn(trace, leaves)`` must build a scalar from the named leaves.  The
    relative error of each coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def evaluate(values):
        tr = Trace(np.float64)
        leaves = {k: tr.leaf(v, name=k) for k, v in values.items()}
        return tr, leaves, fn(tr, leaves)

    tr, leaves, out = evaluate(point)
    analytic = tr.grad(out, leaves)

    worst = 0.0
    for name, base in point.items():
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = dict(point)
                arr = base.copy()
                arr[idx] += sign * epsilon
                shifted[name] = arr
                v = float(evaluate(shifted)[2].value)
                if not np.isfinite(v):
                    raise NonFiniteError(f"non-finite function value at {name}{list(idx)} ({sign:+.0f}eps)")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            a = float(analytic[name][idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
