"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of primitive nodes.  Values are
computed eagerly as nodes are recorded; :meth:`Graph.backward` walks the tape
in reverse insertion order and accumulates vector-Jacobian products.

Two usage styles are supported::

    g = Graph()
    x = g.leaf("x", np.array([1.0, 2.0, 3.0]))
    y = (x * x).sum()
    grads = g.backward(y)          # {"x": array([2., 4., 6.])}

or a reusable builder bound to named inputs::

    g = Graph(lambda g, v: (v["x"] * v["x"]).sum())
    forward(g, {"x": np.array([2.0])})
    backward(g)

Broadcasting is deliberately limited to scalar-times-tensor and adding a
1-D bias along the last axis.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "Graph",
    "Var",
    "forward",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "logsumexp",
    "concat",
    "stack",
    "slice_",
    "gather",
    "dot",
    "reshape",
]


class GraphError(Exception):
    """Base class for tape errors; carries the offending node when known."""

    def __init__(self, message: str, node: int | None = None, op: str | None = None):
        self.node = node
        self.op = op
        where = ""
        if node is not None:
            where = f" [node {node}" + (f", op {op!r}" if op else "") + "]"
        super().__init__(message + where)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class BackwardError(GraphError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.base is not None or not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Var:
    """Handle to a node on a :class:`Graph` tape."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph._values[self.index].shape

    @property
    def ndim(self) -> int:
        return self.graph._values[self.index].ndim

    def __repr__(self) -> str:
        return f"Var(node={self.index}, op={self.graph._ops[self.index]!r}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis: int | None = None) -> "Var":
        return sum(self, axis)

    def mean(self, axis: int | None = None) -> "Var":
        return mean(self, axis)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Graph:
    """Append-only tape of primitive operations.

    Parameters
    ----------
    fn : callable, optional
        Builder ``fn(graph, leaves) -> Var`` used by :func:`forward`.  ``leaves``
        maps each bound input name to its leaf :class:`Var`.
    check_nan : bool
        Raise :class:`NonFiniteError` as soon as a node produces NaN.
    """

    def __init__(self, fn: Callable[["Graph", dict[str, Var]], Var] | None = None, check_nan: bool = True):
        self.fn = fn
        self.check_nan = check_nan
        self.reset()

    def reset(self) -> None:
        self._values: list[np.ndarray] = []
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[VJP | None] = []
        self.leaves: dict[str, int] = {}
        self.output: Var | None = None

    def __len__(self) -> int:
        return len(self._values)

    # -- recording -----------------------------------------------------------

    def record(self, op: str, parents: Sequence[Var], value: np.ndarray, vjp: VJP | None) -> Var:
        """Append a node.  ``vjp(g)`` returns one gradient (or None) per parent."""
        index = len(self._values)
        value = _as_array(value)
        if self.check_nan and np.isnan(value).any():
            raise NonFiniteError("NaN produced", node=index, op=op)
        pidx = tuple(p.index for p in parents)
        for p in parents:
            if p.graph is not self:
                raise GraphError("operand belongs to a different graph", node=index, op=op)
        self._values.append(value)
        self._ops.append(op)
        self._parents.append(pidx)
        self._vjps.append(vjp)
        return Var(self, index)

    def leaf(self, name: str, value) -> Var:
        """Bind a differentiable input under ``name``."""
        if name in self.leaves:
            raise GraphError(f"leaf {name!r} already bound")
        var = self.record("leaf", (), np.array(value, dtype=np.float64), None)
        self.leaves[name] = var.index
        return var

    def constant(self, value) -> Var:
        return self.record("const", (), np.array(value, dtype=np.float64), None)

    def wrap(self, value) -> Var:
        if isinstance(value, Var):
            return value
        return self.constant(value)

    # -- evaluation ----------------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        if self.fn is None:
            raise GraphError("graph has no builder function; record ops eagerly instead")
        self.reset()
        bound = {name: self.leaf(name, value) for name, value in inputs.items()}
        out = self.fn(self, bound)
        if not isinstance(out, Var):
            raise GraphError("builder must return a Var")
        self.output = out
        return out.value

    def backward(self, output: Var | None = None, seed=None) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of ``output`` w.r.t. every leaf.

        ``seed`` defaults to ones of the output shape.  Leaves that the output
        does not depend on receive zeros.
        """
        if output is None:
            output = self.output
        if output is None or not self._values:
            raise BackwardError("backward called before forward")
        if output.graph is not self:
            raise BackwardError("output belongs to a different graph")
        out_val = self._values[output.index]
        if seed is None:
            seed = np.ones_like(out_val)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != out_val.shape:
                raise BackwardError(
                    f"seed shape {seed.shape} does not match output shape {out_val.shape}",
                    node=output.index,
                )
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = seed
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            parent_grads = vjp(g)
            for p, pg in zip(self._parents[i], parent_grads):
                if pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
            if self._ops[i] != "leaf":
                grads[i] = None
        result = {}
        for name, idx in self.leaves.items():
            g = grads[idx] if idx < len(grads) else None
            result[name] = np.zeros_like(self._values[idx]) if g is None else np.asarray(g, dtype=np.float64)
        return result


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    return graph.forward(inputs)


def backward(graph: Graph, seed=None) -> dict[str, np.ndarray]:
    return graph.backward(None, seed)


# -- helpers -------------------------------------------------------------------


def _graph_of(*operands) -> Graph:
    for o in operands:
        if isinstance(o, Var):
            return o.graph
    raise GraphError("at least one operand must be a Var")


def _shape_error(g: Graph, op: str, msg: str) -> ShapeError:
    return ShapeError(msg, node=len(g), op=op)


def _is_scalar_operand(x) -> bool:
    if isinstance(x, Var):
        return x.value.ndim == 0
    return np.ndim(x) == 0


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.wrap(a), g.wrap(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return g.record("add", (a, b), av + bv, lambda go: (go, go))
    if bv.ndim == 0 or av.ndim == 0:
        if bv.ndim == 0:
            return g.record("add", (a, b), av + bv, lambda go: (go, np.sum(go)))
        return g.record("add", (a, b), av + bv, lambda go: (np.sum(go), go))
    if bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        n = bv.shape[0]
        return g.record("add_bias", (a, b), av + bv, lambda go: (go, go.reshape(-1, n).sum(axis=0)))
    raise _shape_error(g, "add", f"incompatible shapes {av.shape} and {bv.shape}")


def neg(a: Var) -> Var:
    g = a.graph
    return g.record("neg", (a,), -a.value, lambda go: (-go,))


def sub(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = g.wrap(a), g.wrap(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return g.record("sub", (a, b), av - bv, lambda go: (go, -go))
    if bv.ndim == 0:
        return g.record("sub", (a, b), av - bv, lambda go: (go, -np.sum(go)))
    if av.ndim == 0:
        return g.record("sub", (a, b), av - bv, lambda go: (np.sum(go), -go))
    raise _shape_error(g, "sub", f"incompatible shapes {av.shape} and {bv.shape}")


def mul(a, b) -> Var:
    g = _graph_of(a, b)
    if not isinstance(a, Var) and _is_scalar_operand(a):
        c = float(a)
        return g.record("scale", (b,), c * b.value, lambda go: (c * go,))
    if not isinstance(b, Var) and _is_scalar_operand(b):
        c = float(b)
        return g.record("scale", (a,), a.value * c, lambda go: (go * c,))
    a, b = g.wrap(a), g.wrap(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return g.record("mul", (a, b), av * bv, lambda go: (go * bv, go * av))
    if av.ndim == 0:
        return g.record("mul", (a, b), av * bv, lambda go: (np.sum(go * bv), go * av))
    if bv.ndim == 0:
        return g.record("mul", (a, b), av * bv, lambda go: (go * bv, np.sum(go * av)))
    raise _shape_error(g, "mul", f"incompatible shapes {av.shape} and {bv.shape}")


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.graph.record("exp", (a,), out, lambda go: (go * out,))


def log(a: Var) -> Var:
    av = a.value
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return a.graph.record("log", (a,), out, lambda go: (go / av,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.graph.record("tanh", (a,), out, lambda go: (go * (1.0 - out * out),))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    """``[..., k] @ [k, m] -> [..., m]``."""
    g = _graph_of(a, b)
    a, b = g.wrap(a), g.wrap(b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise _shape_error(g, "matmul", f"cannot multiply {av.shape} by {bv.shape}")
    k, m = bv.shape
    out = av @ bv

    def vjp(go):
        ga = go @ bv.T
        gb = av.reshape(-1, k).T @ go.reshape(-1, m)
        return ga, gb

    return g.record("matmul", (a, b), out, vjp)


def dot(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    a, b = g.wrap(a), g.wrap(b)
    av, bv = a.value, b.value
    if av.ndim != 1 or av.shape != bv.shape:
        raise _shape_error(g, "dot", f"dot needs equal 1-D shapes, got {av.shape} and {bv.shape}")
    return g.record("dot", (a, b), np.dot(av, bv), lambda go: (go * bv, go * av))


# -- reductions ----------------------------------------------------------------


def _norm_axis(axis: int, ndim: int, g: Graph, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise _shape_error(g, op, f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001
    shape = a.shape
    if axis is None:
        return a.graph.record("sum", (a,), np.sum(a.value), lambda go: (np.full(shape, go, dtype=np.float64),))
    ax = _norm_axis(axis, len(shape), a.graph, "sum")

    def vjp(go):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(go, ax), shape)),)

    return a.graph.record("sum", (a,), np.sum(a.value, axis=ax), vjp)


def mean(a: Var, axis: int | None = None) -> Var:
    shape = a.shape
    if axis is None:
        n = a.value.size
        return a.graph.record(
            "mean", (a,), np.sum(a.value) / n, lambda go: (np.full(shape, go / n, dtype=np.float64),)
        )
    ax = _norm_axis(axis, len(shape), a.graph, "mean")
    n = shape[ax]

    def vjp(go):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(go / n, ax), shape)),)

    return a.graph.record("mean", (a,), np.sum(a.value, axis=ax) / n, vjp)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return out


def logsumexp(a: Var, axis: int = -1) -> Var:
    """Max-shifted log-sum-exp; an all ``-inf`` slice yields ``-inf``."""
    ax = _norm_axis(axis, a.ndim, a.graph, "logsumexp")
    av = a.value
    keep = _lse(av, ax)

    def vjp(go):
        with np.errstate(invalid="ignore"):
            w = np.exp(av - keep)
        w = np.where(np.isfinite(keep), w, 0.0)
        return (np.expand_dims(go, ax) * w,)

    return a.graph.record("logsumexp", (a,), np.squeeze(keep, axis=ax), vjp)


def softmax(a: Var, axis: int = -1) -> Var:
    ax = _norm_axis(axis, a.ndim, a.graph, "softmax")
    s = np.exp(a.value - _lse(a.value, ax))

    def vjp(go):
        return (s * (go - np.sum(go * s, axis=ax, keepdims=True)),)

    return a.graph.record("softmax", (a,), s, vjp)


def log_softmax(a: Var, axis: int = -1) -> Var:
    ax = _norm_axis(axis, a.ndim, a.graph, "log_softmax")
    out = a.value - _lse(a.value, ax)
    s = np.exp(out)

    def vjp(go):
        return (go - s * np.sum(go, axis=ax, keepdims=True),)

    return a.graph.record("log_softmax", (a,), out, vjp)


# -- structural ----------------------------------------------------------------


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    g = _graph_of(*parts)
    parts = [g.wrap(p) for p in parts]
    vals = [p.value for p in parts]
    ax = _norm_axis(axis, vals[0].ndim, g, "concat")
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or any(
            v.shape[d] != vals[0].shape[d] for d in range(v.ndim) if d != ax
        ):
            raise _shape_error(g, "concat", f"cannot concatenate {vals[0].shape} with {v.shape}")
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(go):
        return tuple(np.split(go, splits, axis=ax))

    return g.record("concat", parts, np.concatenate(vals, axis=ax), vjp)


def stack(parts: Sequence[Var], axis: int = 0) -> Var:
    g = _graph_of(*parts)
    parts = [g.wrap(p) for p in parts]
    vals = [p.value for p in parts]
    for v in vals[1:]:
        if v.shape != vals[0].shape:
            raise _shape_error(g, "stack", f"cannot stack {vals[0].shape} with {v.shape}")
    ax = _norm_axis(axis, vals[0].ndim + 1, g, "stack")
    n = len(vals)

    def vjp(go):
        moved = np.moveaxis(go, ax, 0)
        return tuple(moved[i] for i in range(n))

    return g.record("stack", parts, np.stack(vals, axis=ax), vjp)


def slice_(a: Var, key) -> Var:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    shape = a.shape
    try:
        out = a.value[key]
    except IndexError as exc:
        raise _shape_error(a.graph, "slice", str(exc)) from None

    def vjp(go):
        z = np.zeros(shape)
        z[key] = go
        return (z,)

    return a.graph.record("slice", (a,), out, vjp)


def gather(a: Var, index: tuple) -> Var:
    """Advanced indexing ``a[index]`` with repeated indices allowed."""
    shape = a.shape
    try:
        out = a.value[index]
    except IndexError as exc:
        raise _shape_error(a.graph, "gather", str(exc)) from None

    def vjp(go):
        z = np.zeros(shape)
        np.add.at(z, index, go)
        return (z,)

    return a.graph.record("gather", (a,), out, vjp)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise _shape_error(a.graph, "reshape", str(exc)) from None
    return a.graph.record("reshape", (a,), out, lambda go: (go.reshape(old),))
