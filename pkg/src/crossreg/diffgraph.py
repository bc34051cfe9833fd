"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every :class:`Node` in creation order, which is a
valid topological order because a node can only reference nodes that already
exist.  ``Graph.backward`` walks the tape once in reverse.

    g = Graph()
    w = g.param("w", np.ones(3))
    loss = dg.sum(w * w)
    grads = g.backward(loss)      # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""


class GraphError(RuntimeError):
    """Malformed graph: cycle, foreign node or non-scalar loss."""


class Node:
    __slots__ = ("graph", "value", "parents", "op", "backward_fn", "index", "name")
    # make numpy defer to the reflected operators (array @ node, array - node, ...)
    __array_ufunc__ = None

    def __init__(self, graph, value, parents, op, backward_fn, index, name=None):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.op = op
        self.backward_fn = backward_fn
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __repr__(self):
        label = self.name or self.op
        return f"<Node #{self.index} {label} shape={self.shape}>"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return take(self, index)


class Graph:
    """Tape of nodes plus a registry of named parameter nodes."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.check_finite = check_finite
        self.visit_count = 0

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, parents, op, backward_fn=None, name=None) -> Node:
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"op '{op}' produced non-finite values")
        for p in parents:
            if p.graph is not self:
                raise GraphError("node belongs to a different graph")
        node = Node(self, value, tuple(parents), op, backward_fn, len(self.nodes), name)
        self.nodes.append(node)
        return node

    def const(self, value, name=None) -> Node:
        return self._record(np.array(value, dtype=np.float64), (), "const", name=name)

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise GraphError(f"parameter '{name}' registered twice")
        node = self._record(np.array(value, dtype=np.float64), (), "param", name=name)
        self.params[name] = node
        return node

    def custom(self, value, parents: Sequence[Node], backward_fn: Callable, op: str = "custom") -> Node:
        """Record a node whose vector-Jacobian product is ``backward_fn(g_out)``.

        ``backward_fn`` returns one gradient (or None) per parent.
        """
        return self._record(value, parents, op, backward_fn)

    def backward(self, loss: Node, wrt: Sequence[Node] | None = None):
        """Gradients of a scalar ``loss``.

        Returns ``{name: grad}`` over registered parameters, or a list of
        gradients aligned with ``wrt`` when given.  Unreachable nodes get zeros.
        """
        if loss.graph is not self:
            raise GraphError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        visits = 0
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node.index)
            if g is None:
                continue
            visits += 1
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent.index >= node.index:
                    raise GraphError("cycle detected: parent recorded after child")
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.value.shape:
                    raise ShapeError(
                        f"gradient shape {pg.shape} != value shape {parent.value.shape} in '{node.op}'")
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        self.visit_count = visits
        if wrt is not None:
            return [grads.get(n.index, np.zeros_like(n.value)) for n in wrt]
        return {name: grads.get(n.index, np.zeros_like(n.value)) for name, n in self.params.items()}


# -- helpers --------------------------------------------------------------

def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise GraphError("at least one operand must be a Node")


def _lift(graph: Graph, x) -> Node:
    if isinstance(x, Node):
        return x
    return graph.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.value.shape == b.value.shape:
        return g, a, b
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} and {b.shape}") from exc
    return g, a, b


# -- primitives -----------------------------------------------------------

def add(a, b) -> Node:
    g, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return g._record(a.value + b.value, (a, b), "add",
                     lambda go: (_unbroadcast(go, sa), _unbroadcast(go, sb)))


def sub(a, b) -> Node:
    g, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return g._record(a.value - b.value, (a, b), "sub",
                     lambda go: (_unbroadcast(go, sa), _unbroadcast(-go, sb)))


def mul(a, b) -> Node:
    g, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return g._record(av * bv, (a, b), "mul",
                     lambda go: (_unbroadcast(go * bv, av.shape), _unbroadcast(go * av, bv.shape)))


def div(a, b) -> Node:
    g, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return g._record(out, (a, b), "div",
                     lambda go: (_unbroadcast(go / bv, av.shape),
                                 _unbroadcast(-go * out / bv, bv.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.graph._record(a.value * c, (a,), "scale", lambda go: (go * c,))


def negate(a: Node) -> Node:
    return a.graph._record(-a.value, (a,), "negate", lambda go: (-go,))


def matmul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape}")

    def back(go):
        if bv.ndim == 1:
            return np.outer(go, bv), av.T @ go
        return go @ bv.T, av.T @ go

    return g._record(av @ bv, (a, b), "matmul", back)


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.graph._record(out, (a,), "exp", lambda go: (go * out,))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0):
        raise NonFiniteError("log of non-positive value")
    return a.graph._record(np.log(av), (a,), "log", lambda go: (go / av,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.graph._record(out, (a,), "sqrt", lambda go: (go * 0.5 / out,))


def square(a: Node) -> Node:
    av = a.value
    return a.graph._record(av * av, (a,), "square", lambda go: (2.0 * go * av,))


def sin(a: Node) -> Node:
    av = a.value
    return a.graph._record(np.sin(av), (a,), "sin", lambda go: (go * np.cos(av),))


def cos(a: Node) -> Node:
    av = a.value
    return a.graph._record(np.cos(av), (a,), "cos", lambda go: (-go * np.sin(av),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.graph._record(a.value * mask, (a,), "relu", lambda go: (go * mask,))


def clip_min(a: Node, lo: float) -> Node:
    """``max(a, lo)``; gradient is blocked where the clamp is active."""
    mask = a.value > lo
    return a.graph._record(np.where(mask, a.value, lo), (a,), "clip_min", lambda go: (go * mask,))


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def back(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go, shape).copy(),)

    return a.graph._record(out, (a,), "sum", back)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return a.graph._record(a.value.reshape(shape), (a,), "reshape", lambda go: (go.reshape(old),))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return a.graph._record(a.value.T, (a,), "transpose", lambda go: (go.T,))


def take(a: Node, index) -> Node:
    """Numpy-style indexing (basic or advanced); scatter-adds on the way back."""
    shape = a.shape

    def back(go):
        out = np.zeros(shape)
        np.add.at(out, index, go)
        return (out,)

    return a.graph._record(a.value[index], (a,), "slice", back)


slice_ = take


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    g = _graph_of(*xs)
    xs = [_lift(g, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]
    return g._record(out, xs, "concat", lambda go: tuple(np.split(go, splits, axis=axis)))


def stack(xs: Sequence[Node], axis: int = 0) -> Node:
    g = _graph_of(*xs)
    xs = [_lift(g, x) for x in xs]
    out = np.stack([x.value for x in xs], axis=axis)
    return g._record(out, xs, "stack",
                     lambda go: tuple(np.take(go, i, axis=axis) for i in range(len(xs))))


def softmax_row(a: Node) -> Node:
    """Softmax along the last axis."""
    z = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def back(go):
        return (s * (go - np.sum(go * s, axis=-1, keepdims=True)),)

    return a.graph._record(s, (a,), "softmax_row", back)


def logsumexp_row(a: Node) -> Node:
    """log(sum(exp(a))) along the last axis (axis is dropped)."""
    m = np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(a.value - m)
    se = np.sum(e, axis=-1, keepdims=True)
    out = (m + np.log(se))[..., 0]
    s = e / se
    return a.graph._record(out, (a,), "logsumexp_row", lambda go: (go[..., None] * s,))


def l2_norm(a: Node, axis=None) -> Node:
    """Euclidean norm over ``axis`` (all entries when None)."""
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    if np.any(n == 0):
        raise NonFiniteError("l2_norm of a zero vector has no gradient")
    out = n if axis is not None else n.reshape(())
    if axis is not None:
        out = np.squeeze(n, axis=axis)

    def back(go):
        go = np.asarray(go)
        if axis is not None:
            go = np.expand_dims(go, axis)
        return (go * av / n,)

    return a.graph._record(out, (a,), "l2_norm", back)


def normalize_rows(a: Node, eps: float = 0.0) -> Node:
    """Scale every row to unit Euclidean norm."""
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=-1, keepdims=True)) + eps
    if np.any(n == 0):
        raise NonFiniteError("cannot normalise a zero row")
    y = av / n

    def back(go):
        return ((go - y * np.sum(go * y, axis=-1, keepdims=True)) / n,)

    return a.graph._record(y, (a,), "normalize_rows", back)


def cosine_similarity_rows(a, b) -> Node:
    """All-pairs cosine similarity between rows: (n, d), (m, d) -> (n, m)."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_rows shapes {a.shape}, {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def solve(a, b) -> Node:
    """``x = a^{-1} b`` for a square matrix ``a``."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or av.shape[0] != av.shape[1] or bv.shape[0] != av.shape[0]:
        raise ShapeError(f"solve shapes {av.shape}, {bv.shape}")
    x = np.linalg.solve(av, bv)

    def back(go):
        gb = np.linalg.solve(av.T, go)
        ga = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
        return ga, gb

    return g._record(x, (a, b), "solve", back)


def so3_exp(w: Node) -> Node:
    """Rotation matrix ``exp([w]x)`` of a rotation vector (3,) -> (3, 3)."""
    from .geom import axis_angle_to_matrix, skew

    wv = w.value
    r = axis_angle_to_matrix(wv)
    theta2 = float(wv @ wv)
    eye = np.eye(3)

    def back(go):
        out = np.zeros(3)
        for k in range(3):
            if theta2 < 1e-16:
                d = skew(eye[k])
            else:
                # derivative of the exponential map (Gallego & Yezzi form)
                v = np.cross(wv, (eye - r) @ eye[k])
                d = (wv[k] * skew(wv) + skew(v)) / theta2 @ r
            out[k] = np.sum(go * d)
        return (out,)

    return w.graph._record(r, (w,), "so3_exp", back)


def project_so3(m: Node) -> Node:
    """Orthogonal polar factor of a near-rotation matrix.

    The backward rule is the exact derivative at orthonormal inputs,
    ``dR = R skew(R^T dM)``; it is used for inputs that are orthonormal up to
    rounding.
    """
    from .geom import orthonormalize

    r = orthonormalize(m.value)

    def back(go):
        a = r.T @ go
        return (r @ (0.5 * (a - a.T)),)

    return m.graph._record(r, (m,), "project_so3", back)


# -- verification ---------------------------------------------------------

@dataclass
class FiniteDiffReport:
    error: float
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(f: Callable[[Graph, Node], Node], theta, step: float = 1e-6,
                      floor: float = 1e-8) -> FiniteDiffReport:
    """Compare the tape gradient of ``f`` with central differences.

    ``f(graph, theta_node)`` builds a scalar loss.  The error is
    ``max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf, floor)``.
    """
    theta = np.array(theta, dtype=np.float64)
    g = Graph()
    node = g.param("theta", theta)
    loss = f(g, node)
    analytic = g.backward(loss)["theta"]

    def value_at(x):
        gg = Graph()
        return float(f(gg, gg.param("theta", x)).value)

    numeric = np.zeros_like(theta)
    flat = numeric.reshape(-1)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = step
        e = e.reshape(theta.shape)
        flat[i] = (value_at(theta + e) - value_at(theta - e)) / (2.0 * step)
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric)) / denom)
    return FiniteDiffReport(err, analytic, numeric)
