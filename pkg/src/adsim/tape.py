"""Reverse-mode automatic differentiation over numpy arrays.

The tape records vector/matrix-level primitives (not scalars), so a full
150-step rollout over a batch of environments stays at a few thousand nodes.
Every op accepts either plain ``numpy`` arrays or :class:`Node` operands; with
plain arrays it evaluates eagerly and returns an array, so simulation code is
written once and runs both untaped (deployment) and taped (training).

Tapes are single-owner: one logical thread creates, forward-fills, and
reverse-sweeps a tape. Nodes are appended in creation order, which is a
topological order, so the reverse sweep is a reverse-topological visit.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "Gradients",
    "TapeError",
    "NonFiniteValueError",
    "add", "sub", "mul", "div", "neg",
    "matmul", "matvec", "transpose2", "linear",
    "tanh", "sqrt", "huber_sum", "where",
    "reduce_sum", "reduce_mean",
    "getitem", "concat", "stack", "reshape",
    "skew", "axpy", "rk4_combine", "gram_schmidt_rows",
    "register_primitive", "apply_primitive", "registered_primitives",
    "value_of", "check_finite",
]


class TapeError(Exception):
    pass


class NonFiniteValueError(TapeError):
    """A taped value contains NaN or inf."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive registry: name -> (forward, backward).
#   forward(aux, *parent_values) -> value
#   backward(aux, value, parent_values, grad, needs) -> per-parent grads
# `needs` flags which parents require a gradient; heavy ops honour it.
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _primitive(name: str):
    def deco(fns):
        fwd, bwd = fns()
        _FORWARD[name] = fwd
        _BACKWARD[name] = bwd
        return fns
    return deco


@_primitive("add")
def _op_add():
    def fwd(aux, a, b):
        return a + b
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return fwd, bwd


@_primitive("sub")
def _op_sub():
    def fwd(aux, a, b):
        return a - b
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)
    return fwd, bwd


@_primitive("mul")
def _op_mul():
    def fwd(aux, a, b):
        return a * b
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)
    return fwd, bwd


@_primitive("div")
def _op_div():
    def fwd(aux, a, b):
        return a / b
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None)
    return fwd, bwd


@_primitive("neg")
def _op_neg():
    def fwd(aux, a):
        return -a
    def bwd(aux, y, pv, g, needs):
        return (-g,)
    return fwd, bwd


@_primitive("matmul")
def _op_matmul():
    def fwd(aux, a, b):
        return np.matmul(a, b)
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb
    return fwd, bwd


@_primitive("matvec")
def _op_matvec():
    # y[..., i] = A[..., i, j] x[..., j]
    def fwd(aux, A, x):
        return np.einsum("...ij,...j->...i", A, x)
    def bwd(aux, y, pv, g, needs):
        A, x = pv
        gA = gx = None
        if needs[0]:
            gA = _unbroadcast(np.einsum("...i,...j->...ij", g, x), A.shape)
        if needs[1]:
            gx = _unbroadcast(np.einsum("...ij,...i->...j", A, g), x.shape)
        return gA, gx
    return fwd, bwd


@_primitive("transpose2")
def _op_transpose2():
    def fwd(aux, a):
        return np.swapaxes(a, -1, -2)
    def bwd(aux, y, pv, g, needs):
        return (np.swapaxes(g, -1, -2),)
    return fwd, bwd


@_primitive("linear")
def _op_linear():
    # y = x @ W.T + b with x of ndim 1 or 2, W [out,in], b [out].
    def fwd(aux, x, W, b):
        return np.matmul(x, W.T) + b
    def bwd(aux, y, pv, g, needs):
        x, W, b = pv
        gx = gW = gb = None
        if needs[0]:
            gx = np.matmul(g, W)
        if needs[1]:
            gW = np.outer(g, x) if x.ndim == 1 else np.matmul(g.T, x)
        if needs[2]:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb
    return fwd, bwd


@_primitive("tanh")
def _op_tanh():
    def fwd(aux, a):
        return np.tanh(a)
    def bwd(aux, y, pv, g, needs):
        return (g * (1.0 - y * y),)
    return fwd, bwd


@_primitive("sqrt")
def _op_sqrt():
    def fwd(aux, a):
        return np.sqrt(a)
    def bwd(aux, y, pv, g, needs):
        return (g * 0.5 / y,)
    return fwd, bwd


@_primitive("huber_sum")
def _op_huber_sum():
    # sum over the last axis of the elementwise Huber function rho_delta.
    def fwd(aux, a):
        delta = aux
        q = np.abs(a)
        rho = np.where(q <= delta, 0.5 * a * a, delta * (q - 0.5 * delta))
        return rho.sum(axis=-1)
    def bwd(aux, y, pv, g, needs):
        (a,) = pv
        delta = aux
        return (g[..., None] * np.clip(a, -delta, delta),)
    return fwd, bwd


@_primitive("where")
def _op_where():
    # aux is a plain boolean mask; grad routes to the selected branch.
    def fwd(aux, a, b):
        return np.where(aux, a, b)
    def bwd(aux, y, pv, g, needs):
        a, b = pv
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.where(aux, g, 0.0), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.where(aux, 0.0, g), b.shape)
        return ga, gb
    return fwd, bwd


@_primitive("reduce_sum")
def _op_reduce_sum():
    def fwd(aux, a):
        axis, keepdims = aux
        return a.sum(axis=axis, keepdims=keepdims)
    def bwd(aux, y, pv, g, needs):
        (a,) = pv
        axis, keepdims = aux
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return fwd, bwd


@_primitive("reduce_mean")
def _op_reduce_mean():
    def fwd(aux, a):
        axis, keepdims = aux
        return a.mean(axis=axis, keepdims=keepdims)
    def bwd(aux, y, pv, g, needs):
        (a,) = pv
        axis, keepdims = aux
        n = a.size if axis is None else a.shape[axis]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return fwd, bwd


@_primitive("getitem")
def _op_getitem():
    # aux is a basic-indexing key (ints/slices/Ellipsis only).
    def fwd(aux, a):
        out = a[aux]
        return out.copy() if isinstance(out, np.ndarray) else out
    def bwd(aux, y, pv, g, needs):
        (a,) = pv
        ga = np.zeros_like(a)
        ga[aux] = g
        return (ga,)
    return fwd, bwd


@_primitive("concat")
def _op_concat():
    def fwd(aux, *parts):
        return np.concatenate(parts, axis=aux)
    def bwd(aux, y, pv, g, needs):
        sizes = [p.shape[aux] for p in pv]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=aux))
    return fwd, bwd


@_primitive("stack")
def _op_stack():
    def fwd(aux, *parts):
        return np.stack(parts, axis=aux)
    def bwd(aux, y, pv, g, needs):
        return tuple(np.moveaxis(g, aux, 0))
    return fwd, bwd


@_primitive("reshape")
def _op_reshape():
    def fwd(aux, a):
        return a.reshape(aux)
    def bwd(aux, y, pv, g, needs):
        (a,) = pv
        return (g.reshape(a.shape),)
    return fwd, bwd


@_primitive("axpy")
def _op_axpy():
    # x + a * k with scalar a (RK4 stage states).
    def fwd(aux, x, k):
        return x + aux * k
    def bwd(aux, y, pv, g, needs):
        return (g if needs[0] else None, aux * g if needs[1] else None)
    return fwd, bwd


@_primitive("rk4_combine")
def _op_rk4_combine():
    # x + (dt/6)(k1 + 2 k2 + 2 k3 + k4)
    def fwd(aux, x, k1, k2, k3, k4):
        return x + (aux / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    def bwd(aux, y, pv, g, needs):
        s = aux / 6.0
        return (g, s * g, (2.0 * s) * g, (2.0 * s) * g, s * g)
    return fwd, bwd


@_primitive("gram_schmidt_rows")
def _op_gram_schmidt_rows():
    # Orthonormalize rows 0,1; row 2 = row0 x row1 (right-handed). The input's
    # third row never enters the forward pass, so its gradient is zero.
    def fwd(aux, R):
        r0 = R[..., 0, :]
        r1 = R[..., 1, :]
        n0 = np.linalg.norm(r0, axis=-1, keepdims=True)
        e0 = r0 / n0
        a = np.sum(e0 * r1, axis=-1, keepdims=True)
        w = r1 - a * e0
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        e1 = w / nw
        e2 = np.cross(e0, e1)
        return np.stack([e0, e1, e2], axis=-2)
    def bwd(aux, y, pv, g, needs):
        (R,) = pv
        r0 = R[..., 0, :]
        r1 = R[..., 1, :]
        e0 = y[..., 0, :]
        e1 = y[..., 1, :]
        n0 = np.linalg.norm(r0, axis=-1, keepdims=True)
        a = np.sum(e0 * r1, axis=-1, keepdims=True)
        w = r1 - a * e0
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        g0 = g[..., 0, :]
        g1 = g[..., 1, :]
        g2 = g[..., 2, :]
        ge0 = g0 + np.cross(e1, g2)
        ge1 = g1 + np.cross(g2, e0)
        gw = (ge1 - e1 * np.sum(e1 * ge1, axis=-1, keepdims=True)) / nw
        gw_e0 = np.sum(gw * e0, axis=-1, keepdims=True)
        gr1 = gw - gw_e0 * e0
        ge0 = ge0 - gw_e0 * r1 - a * gw
        gr0 = (ge0 - e0 * np.sum(e0 * ge0, axis=-1, keepdims=True)) / n0
        gR = np.zeros_like(R)
        gR[..., 0, :] = gr0
        gR[..., 1, :] = gr1
        return (gR,)
    return fwd, bwd


@_primitive("skew")
def _op_skew():
    # [..., 3] -> [..., 3, 3] skew-symmetric matrix with skew(v) @ w == v x w.
    def fwd(aux, v):
        out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
        out[..., 0, 1] = -v[..., 2]
        out[..., 0, 2] = v[..., 1]
        out[..., 1, 0] = v[..., 2]
        out[..., 1, 2] = -v[..., 0]
        out[..., 2, 0] = -v[..., 1]
        out[..., 2, 1] = v[..., 0]
        return out
    def bwd(aux, y, pv, g, needs):
        gv = np.stack([
            g[..., 2, 1] - g[..., 1, 2],
            g[..., 0, 2] - g[..., 2, 0],
            g[..., 1, 0] - g[..., 0, 1],
        ], axis=-1)
        return (gv,)
    return fwd, bwd


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------

class Node:
    """A recorded value on a tape. Supports +, -, * with nodes and arrays."""

    __slots__ = ("tape", "index", "value", "op", "parents", "aux", "needs_grad")

    # Keep numpy from absorbing us into elementwise ufunc loops so that
    # `ndarray <op> Node` falls through to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, tape, index, value, op, parents, aux, needs_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Node(#{self.index} {self.op} shape={self.value.shape})"


class Gradients:
    """Result of a reverse sweep; indexable by the nodes gradients flowed to."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node: Node) -> np.ndarray:
        g = self._grads.get(node.index)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def __contains__(self, node: Node) -> bool:
        return node.index in self._grads


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Node:
        """A differentiable input; backward() produces a gradient for it."""
        return self._append("leaf", (), _f64(value), None, True)

    def constant(self, value) -> Node:
        """A recorded value that never receives a gradient."""
        return self._append("const", (), _f64(value), None, False)

    def _append(self, op, parents, value, aux, needs_grad) -> Node:
        node = Node(self, len(self.nodes), value, op, parents, aux, needs_grad)
        self.nodes.append(node)
        return node

    def record(self, op: str, parents: Sequence[Node], aux: Any = None) -> Node:
        values = tuple(p.value for p in parents)
        value = _FORWARD[op](aux, *values)
        needs = any(p.needs_grad for p in parents)
        return self._append(op, tuple(p.index for p in parents), _f64(value), aux, needs)

    def backward(self, output: Node, seed=None) -> Gradients:
        """Reverse sweep from `output`, visiting nodes in reverse record order.

        `output` must be scalar unless an explicit cotangent `seed` is given.
        """
        if output.tape is not self:
            raise TapeError("output node belongs to a different tape")
        if seed is None:
            if output.value.ndim != 0:
                raise TapeError("backward() from a non-scalar needs an explicit seed")
            seed = np.ones((), dtype=np.float64)
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = _f64(seed)
        for i in range(output.index, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.op in ("leaf", "const"):
                continue
            pvals = tuple(self.nodes[j].value for j in node.parents)
            needs = tuple(self.nodes[j].needs_grad for j in node.parents)
            pgrads = _BACKWARD[node.op](node.aux, node.value, pvals, g, needs)
            for j, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[j].needs_grad:
                    continue
                grads[j] = pg if grads[j] is None else grads[j] + pg
            grads[i] = None  # processed; free intermediate memory early
        out = {i: _f64(g) for i, g in enumerate(grads)
               if g is not None and self.nodes[i].op == "leaf"}
        return Gradients(out)

    def replay(self) -> None:
        """Recompute every non-leaf node from its parents; values must match
        bit-exactly. Raises TapeError otherwise."""
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                continue
            pvals = tuple(self.nodes[j].value for j in node.parents)
            redo = _f64(_FORWARD[node.op](node.aux, *pvals))
            if not np.array_equal(redo, node.value):
                raise TapeError(f"replay mismatch at node #{node.index} ({node.op})")


# ---------------------------------------------------------------------------
# Dual-mode op frontends: Node in -> Node out, plain arrays in -> array out.
# ---------------------------------------------------------------------------

def value_of(x) -> np.ndarray:
    """The underlying array of a Node, or the array itself."""
    return x.value if isinstance(x, Node) else _f64(x)


def _find_tape(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _dispatch(op: str, args, aux=None):
    tape = _find_tape(*args)
    if tape is None:
        return _f64(_FORWARD[op](aux, *(_f64(a) for a in args)))
    return tape.record(op, [_lift(tape, a) for a in args], aux)


def add(a, b):
    return _dispatch("add", (a, b))


def sub(a, b):
    return _dispatch("sub", (a, b))


def mul(a, b):
    return _dispatch("mul", (a, b))


def div(a, b):
    return _dispatch("div", (a, b))


def neg(a):
    return _dispatch("neg", (a,))


def matmul(a, b):
    return _dispatch("matmul", (a, b))


def matvec(A, x):
    return _dispatch("matvec", (A, x))


def transpose2(a):
    return _dispatch("transpose2", (a,))


def linear(x, W, b):
    """Affine layer x @ W.T + b; x may be a single vector or a batch."""
    return _dispatch("linear", (x, W, b))


def tanh(a):
    return _dispatch("tanh", (a,))


def sqrt(a):
    return _dispatch("sqrt", (a,))


def huber_sum(a, delta: float = 1.0):
    """Sum of the Huber function over the last axis (C1 everywhere)."""
    return _dispatch("huber_sum", (a,), aux=float(delta))


def where(mask, a, b):
    """Select by a plain boolean mask (the mask is not differentiated)."""
    return _dispatch("where", (a, b), aux=np.asarray(mask, dtype=bool))


def reduce_sum(a, axis=None, keepdims=False):
    return _dispatch("reduce_sum", (a,), aux=(axis, keepdims))


def reduce_mean(a, axis=None, keepdims=False):
    return _dispatch("reduce_mean", (a,), aux=(axis, keepdims))


def getitem(a, idx):
    return _dispatch("getitem", (a,), aux=idx)


def concat(parts, axis=-1):
    return _dispatch("concat", tuple(parts), aux=int(axis))


def stack(parts, axis=0):
    return _dispatch("stack", tuple(parts), aux=int(axis))


def reshape(a, shape):
    return _dispatch("reshape", (a,), aux=tuple(int(s) for s in shape))


def skew(v):
    """Skew-symmetric matrix [v]_x with skew(v) @ w == v x w."""
    return _dispatch("skew", (v,))


def axpy(x, k, a: float):
    """x + a * k in one node (RK4 stage states)."""
    return _dispatch("axpy", (x, k), aux=float(a))


def rk4_combine(x, k1, k2, k3, k4, dt: float):
    return _dispatch("rk4_combine", (x, k1, k2, k3, k4), aux=float(dt))


def gram_schmidt_rows(R):
    return _dispatch("gram_schmidt_rows", (R,))


def register_primitive(name: str, fwd: Callable, bwd: Callable) -> None:
    """Register a fused domain primitive (see adsim.dynamics, adsim.tasks)."""
    if name in _FORWARD:
        raise ValueError(f"primitive {name!r} already registered")
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


def apply_primitive(name: str, args, aux=None):
    """Dispatch a registered primitive by name (dual-mode)."""
    return _dispatch(name, args, aux)


def registered_primitives() -> tuple[str, ...]:
    return tuple(_FORWARD)


def check_finite(x, context: str = "") -> None:
    v = value_of(x)
    if not np.all(np.isfinite(v)):
        raise NonFiniteValueError(f"non-finite value{' in ' + context if context else ''}")
