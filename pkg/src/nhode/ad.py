"""Minimal reverse-mode differentiation over dense float64 arrays.

Graphs are built eagerly: every op evaluates its value on construction and,
when any parent requires a gradient, appends itself to the owning tape.
``Tape.backward`` then walks the tape in reverse creation order, which is a
topological order by construction.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Batched data is
laid out as ``(batch, features)``; parameters are ``(fan_in, fan_out)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "GraphError",
    "Node",
    "Tape",
    "affine",
    "matmul",
    "tanh",
    "tanh_deriv",
    "mul",
    "add",
    "sub",
    "neg",
    "scale",
    "lincomb",
    "square",
    "sqrt",
    "reciprocal",
    "sum",
    "concat",
    "gather",
    "finite_difference_gradient",
]


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a graph boundary."""


class GraphError(ValueError):
    """Malformed graph usage: shape mismatch, bad seed, foreign node."""


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value in {what}")


class Node:
    __slots__ = ("op", "parents", "value", "adjoint", "requires_grad", "tape", "_vjp")

    def __init__(self, tape, op, value, parents=(), vjp=None):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = parents
        self.adjoint = None
        self.requires_grad = vjp is not None and tape.record
        self._vjp = vjp if self.requires_grad else None
        if self.requires_grad:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.adjoint

    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __sub__(self, other: Node) -> Node:
        return sub(self, other)

    def __mul__(self, other: Node) -> Node:
        return mul(self, other)

    def __neg__(self) -> Node:
        return neg(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Owns the recorded nodes of one graph.

    With ``record=False`` ops still evaluate but nothing is kept, so long
    numeric rollouts don't accumulate memory.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, "constant input")
        return Node(self, "input", value)

    def variable(self, value) -> Node:
        """An input whose adjoint is wanted (a parameter or a differentiated input)."""
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, "variable input")
        return Node(self, "input", value, (), _leaf_vjp)

    def backward(self, root: Node, seed=None, retain: bool = False) -> None:
        """Accumulate d(seed . root)/d(node) into the adjoint of every variable.

        Interior adjoints are dropped as soon as they have been propagated
        unless ``retain`` is set.
        """
        if root.tape is not self:
            raise GraphError("root does not belong to this tape")
        if not root.requires_grad:
            raise GraphError("root does not depend on any variable")
        _check_finite(root.value, "graph root")
        if seed is None:
            seed = np.ones_like(root.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != root.value.shape:
                raise GraphError(f"seed shape {seed.shape} != root shape {root.value.shape}")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = seed
        for node in reversed(self.nodes):
            adj = node.adjoint
            if adj is None or not node.parents:
                continue
            contribs = node._vjp(adj)
            for parent, contrib in zip(node.parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.adjoint is None:
                    parent.adjoint = contrib
                else:
                    parent.adjoint = parent.adjoint + contrib
            if not retain:
                node.adjoint = None
        for node in self.nodes:
            if node.op == "input" and node.adjoint is None:
                node.adjoint = np.zeros_like(node.value)


def _leaf_vjp(adj):
    return ()


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for other in nodes[1:]:
        if other.tape is not tape:
            raise GraphError("nodes from different tapes")
    return tape


def _any_grad(*nodes: Node) -> bool:
    return any(n.requires_grad for n in nodes)


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise GraphError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def affine(x: Node, w: Node, b: Node) -> Node:
    """``x @ w + b`` with ``x`` of shape (batch, fan_in)."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise GraphError(f"affine: incompatible shapes {xv.shape}, {wv.shape}, {bv.shape}")
    value = xv @ wv + bv
    if not _any_grad(x, w, b):
        return Node(tape, "affine", value)

    def vjp(adj):
        gx = adj @ wv.T if x.requires_grad else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ adj.reshape(-1, adj.shape[-1]) if w.requires_grad else None
        gb = adj.reshape(-1, adj.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Node(tape, "affine", value, (x, w, b), vjp)


def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    bm = bv.T if transpose_b else bv
    if av.ndim != 2 or bm.ndim != 2 or av.shape[1] != bm.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {av.shape}, {bm.shape}")
    value = av @ bm
    if not _any_grad(a, b):
        return Node(tape, "matmul", value)

    def vjp(adj):
        ga = adj @ bm.T if a.requires_grad else None
        if b.requires_grad:
            gb = adj.T @ av if transpose_b else av.T @ adj
        else:
            gb = None
        return ga, gb

    return Node(tape, "matmul", value, (a, b), vjp)


def tanh(x: Node) -> Node:
    value = np.tanh(x.value)
    if not x.requires_grad:
        return Node(x.tape, "tanh", value)
    return Node(x.tape, "tanh", value, (x,), lambda adj: (adj * (1.0 - value * value),))


def tanh_deriv(h: Node) -> Node:
    """``1 - h**2``: the tanh derivative expressed through the tanh output ``h``."""
    hv = h.value
    value = 1.0 - hv * hv
    if not h.requires_grad:
        return Node(h.tape, "tanh_deriv", value)
    return Node(h.tape, "tanh_deriv", value, (h,), lambda adj: (-2.0 * hv * adj,))


def mul(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    value = av * bv
    if not _any_grad(a, b):
        return Node(tape, "mul", value)
    return Node(tape, "mul", value, (a, b), lambda adj: (adj * bv, adj * av))


def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _same_shape(a, b, "add")
    value = a.value + b.value
    if not _any_grad(a, b):
        return Node(tape, "add", value)
    return Node(tape, "add", value, (a, b), lambda adj: (adj, adj))


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _same_shape(a, b, "sub")
    value = a.value - b.value
    if not _any_grad(a, b):
        return Node(tape, "sub", value)
    return Node(tape, "sub", value, (a, b), lambda adj: (adj, -adj))


def neg(x: Node) -> Node:
    if not x.requires_grad:
        return Node(x.tape, "negate", -x.value)
    return Node(x.tape, "negate", -x.value, (x,), lambda adj: (-adj,))


def scale(x: Node, c) -> Node:
    """Multiply by a constant scalar or a constant per-feature vector."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim > 1 or (c.ndim == 1 and c.shape[0] != x.value.shape[-1]):
        raise GraphError(f"scale: constant of shape {c.shape} for value {x.value.shape}")
    value = x.value * c
    if not x.requires_grad:
        return Node(x.tape, "scale", value)
    return Node(x.tape, "scale", value, (x,), lambda adj: (adj * c,))


def lincomb(nodes: Sequence[Node], coeffs: Sequence[float]) -> Node:
    """``sum_i coeffs[i] * nodes[i]``; zero coefficients are skipped."""
    pairs = [(n, float(c)) for n, c in zip(nodes, coeffs) if c != 0.0]
    if not pairs:
        raise GraphError("lincomb: all coefficients are zero")
    tape = _tape_of(*(n for n, _ in pairs))
    shape = pairs[0][0].value.shape
    value = None
    for n, c in pairs:
        if n.value.shape != shape:
            raise GraphError(f"lincomb: shape mismatch {n.value.shape} vs {shape}")
        term = n.value if c == 1.0 else c * n.value
        value = term if value is None else value + term
    if value is pairs[0][0].value:
        value = value.copy()
    parents = tuple(n for n, _ in pairs)
    if not _any_grad(*parents):
        return Node(tape, "lincomb", value)
    cs = tuple(c for _, c in pairs)

    def vjp(adj):
        return tuple(adj if c == 1.0 else c * adj for c in cs)

    return Node(tape, "lincomb", value, parents, vjp)


def square(x: Node) -> Node:
    xv = x.value
    value = xv * xv
    if not x.requires_grad:
        return Node(x.tape, "square", value)
    return Node(x.tape, "square", value, (x,), lambda adj: (2.0 * xv * adj,))


def sqrt(x: Node, floor: float = 0.0) -> Node:
    """``sqrt(max(x, floor**2))``; zero derivative where the floor is active."""
    xv = x.value
    if floor > 0.0:
        active = xv > floor * floor
        value = np.sqrt(np.where(active, xv, floor * floor))
    else:
        if (xv < 0).any():
            raise GraphError("sqrt of negative value")
        active = None
        value = np.sqrt(xv)
    if not x.requires_grad:
        return Node(x.tape, "sqrt", value)

    def vjp(adj):
        g = 0.5 * adj / value
        return (g if active is None else np.where(active, g, 0.0),)

    return Node(x.tape, "sqrt", value, (x,), vjp)


def reciprocal(x: Node) -> Node:
    value = 1.0 / x.value
    if not x.requires_grad:
        return Node(x.tape, "reciprocal", value)
    return Node(x.tape, "reciprocal", value, (x,), lambda adj: (-adj * value * value,))


def sum(x: Node, axis: int | None = None) -> Node:  # noqa: A001
    xv = x.value
    value = np.asarray(xv.sum() if axis is None else xv.sum(axis=axis))
    if not x.requires_grad:
        return Node(x.tape, "sum", value)
    shape = xv.shape

    def vjp(adj):
        if axis is None:
            return (np.full(shape, float(adj)),)
        return (np.broadcast_to(np.expand_dims(adj, axis), shape).copy(),)

    return Node(x.tape, "sum", value, (x,), vjp)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    values = [n.value for n in nodes]
    value = np.concatenate(values, axis=axis)
    if not _any_grad(*nodes):
        return Node(tape, "concat", value)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(adj):
        return tuple(np.split(adj, splits, axis=axis))

    return Node(tape, "concat", value, tuple(nodes), vjp)


def gather(x: Node, index, axis: int = -1) -> Node:
    """Select entries along ``axis`` (feature columns by default)."""
    index = np.asarray(index, dtype=np.intp)
    xv = x.value
    value = np.take(xv, index, axis=axis)
    if not x.requires_grad:
        return Node(x.tape, "gather", value)
    unique = len(np.unique(index)) == len(index)
    ax = axis % xv.ndim

    def vjp(adj):
        g = np.zeros_like(xv)
        sl = [slice(None)] * xv.ndim
        sl[ax] = index
        if unique:
            g[tuple(sl)] = adj
        else:
            np.add.at(g, tuple(sl), adj)
        return (g,)

    return Node(x.tape, "gather", value, (x,), vjp)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per component."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
