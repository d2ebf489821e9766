"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. Vectors are ``(1, k)`` rows or ``(n, 1)``
columns; scalars are ``(1, 1)``. Elementwise binary ops broadcast a
``(1, k)``, ``(n, 1)`` or ``(1, 1)`` operand against an ``(n, k)`` one and
nothing else.

The module-level functions (:func:`tanh`, :func:`sigma`, :func:`matmul`, ...)
accept either :class:`Var` handles or plain ndarrays. With ndarrays they
compute directly in numpy, so the same model code runs with or without a
tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "matvec",
    "transpose",
    "sum",
    "mean",
    "sqnorm",
    "square",
    "exp",
    "log",
    "reciprocal",
    "tanh",
    "sigma",
    "sigma_tanh",
    "slice_cols",
    "custom",
    "value_of",
    "finite_diff_check",
    "finite_diff_report",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _sigma_np(x: np.ndarray) -> np.ndarray:
    # log(e^x + e^-x) without overflow
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a))


class Node:
    __slots__ = ("op", "parents", "value", "grad", "requires_grad", "ctx", "name")

    def __init__(self, op, parents, value, requires_grad, ctx=None, name=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.name = name


class Tape:
    """Define-by-run record of operations; rebuilt for every evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, parents, value, ctx=None, name=None, requires_grad=None) -> Var:
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(Node(op, parents, value, requires_grad, ctx, name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        value = _as_matrix(value, copy=True)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"leaf {name!r} has non-finite entries")
        if name is None:
            name = f"leaf{len(self.leaves)}"
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        var = self._push("leaf", (), value, name=name, requires_grad=True)
        self.leaves[name] = var.index
        return var

    def constant(self, value) -> Var:
        value = _as_matrix(value)
        if not np.isfinite(value).all():
            raise NonFiniteError("constant has non-finite entries")
        return self._push("const", (), value, requires_grad=False)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("variable belongs to a different tape")
            return x
        return self.constant(x)

    def backward(self, root: Var) -> dict[str, np.ndarray]:
        """Accumulate d(root)/d(node) for every node; return leaf gradients.

        Accumulators are reset on each call, so repeated calls are idempotent.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        nodes = self.nodes
        for node in nodes:
            node.grad = None
        nodes[root.index].grad = np.ones((1, 1))
        for i in range(root.index, -1, -1):
            node = nodes[i]
            g = node.grad
            if g is None or not node.requires_grad or not node.parents:
                continue
            parent_grads = _VJP[node.op](g, node, nodes)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                parent = nodes[p]
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        out = {}
        for name, idx in self.leaves.items():
            g = nodes[idx].grad
            out[name] = np.zeros_like(nodes[idx].value) if g is None else g
        return out


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape.nodes[self.index].value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.nodes[self.index].grad

    @property
    def T(self) -> Var:
        return transpose(self)

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(op={node.op}, shape={node.value.shape})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _as_matrix(x, copy: bool = False) -> np.ndarray:
    a = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got {a.ndim}")
    return a


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _compute(op: str, fn: Callable[[], np.ndarray]) -> np.ndarray:
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
            out = fn()
    except FloatingPointError as exc:
        raise NonFiniteError(f"non-finite result in {op}: {exc}") from None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# binary elementwise


def _binary(op: str, a, b, fn):
    tape = _tape_of(a, b)
    if tape is None:
        a = _as_matrix(a)
        b = _as_matrix(b)
        _check_broadcast(op, a, b)
        return fn(a, b)
    va, vb = tape.lift(a), tape.lift(b)
    _check_broadcast(op, va.value, vb.value)
    value = _compute(op, lambda: fn(va.value, vb.value))
    return tape._push(op, (va.index, vb.index), value)


def add(a, b):
    return _binary("add", a, b, np.add)


def sub(a, b):
    return _binary("sub", a, b, np.subtract)


def mul(a, b):
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, b)
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(b, a)
    return _binary("mul", a, b, np.multiply)


def scale(a, k: float):
    """Multiply by a Python scalar constant."""
    k = float(k)
    if not isinstance(a, Var):
        return _as_matrix(a) * k
    value = _compute("scale", lambda: a.value * k)
    return a.tape._push("scale", (a.index,), value, ctx=k)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    av, bv = _as_matrix(av), _as_matrix(bv)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    if tape is None:
        return av @ bv
    va, vb = tape.lift(a), tape.lift(b)
    value = va.value @ vb.value
    # BLAS does not raise floating point flags
    if not np.isfinite(value).all():
        raise NonFiniteError("non-finite result in matmul")
    return tape._push("matmul", (va.index, vb.index), value)


def matvec(a, x):
    """Matrix times column vector ``(k, 1)``."""
    if value_of(x).shape[1] != 1:
        raise ShapeError(f"matvec expects a column vector, got {value_of(x).shape}")
    return matmul(a, x)


def transpose(a):
    if not isinstance(a, Var):
        return _as_matrix(a).T
    return a.tape._push("transpose", (a.index,), a.value.T)


def slice_cols(a, start: int, stop: int):
    if not isinstance(a, Var):
        return _as_matrix(a)[:, start:stop]
    v = a.value
    if not (0 <= start < stop <= v.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {v.shape}")
    return a.tape._push("slice_cols", (a.index,), v[:, start:stop], ctx=(start, stop, v.shape[1]))


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis: int | None = None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Var):
        a = _as_matrix(a)
        return a.sum().reshape(1, 1) if axis is None else a.sum(axis=axis, keepdims=True)
    v = a.value
    out = v.sum().reshape(1, 1) if axis is None else v.sum(axis=axis, keepdims=True)
    return a.tape._push("sum", (a.index,), out, ctx=v.shape)


def mean(a, axis: int | None = None):
    if not isinstance(a, Var):
        a = _as_matrix(a)
        return a.mean().reshape(1, 1) if axis is None else a.mean(axis=axis, keepdims=True)
    v = a.value
    if v.size == 0:
        raise ShapeError("mean of empty tensor")
    count = v.size if axis is None else v.shape[axis]
    out = v.mean().reshape(1, 1) if axis is None else v.mean(axis=axis, keepdims=True)
    return a.tape._push("mean", (a.index,), out, ctx=(v.shape, count))


def sqnorm(a, axis: int | None = None):
    """Squared Euclidean norm; ``axis=1`` gives one value per row."""
    if not isinstance(a, Var):
        a = _as_matrix(a)
        sq = a * a
        return sq.sum().reshape(1, 1) if axis is None else sq.sum(axis=axis, keepdims=True)
    v = a.value
    sq = v * v
    out = sq.sum().reshape(1, 1) if axis is None else sq.sum(axis=axis, keepdims=True)
    return a.tape._push("sqnorm", (a.index,), out)


# ---------------------------------------------------------------------------
# unary elementwise


def square(a):
    if not isinstance(a, Var):
        a = _as_matrix(a)
        return a * a
    return a.tape._push("square", (a.index,), _compute("square", lambda: a.value * a.value))


def exp(a):
    if not isinstance(a, Var):
        return _compute("exp", lambda: np.exp(a))
    return a.tape._push("exp", (a.index,), _compute("exp", lambda: np.exp(a.value)))


def log(a):
    if not isinstance(a, Var):
        return _compute("log", lambda: np.log(a))
    return a.tape._push("log", (a.index,), _compute("log", lambda: np.log(a.value)))


def reciprocal(a):
    if not isinstance(a, Var):
        return _compute("reciprocal", lambda: 1.0 / _as_matrix(a))
    return a.tape._push("reciprocal", (a.index,), _compute("reciprocal", lambda: 1.0 / a.value))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    return a.tape._push("tanh", (a.index,), np.tanh(a.value))


def sigma(a):
    """log(exp(x) + exp(-x)), the antiderivative of tanh."""
    if not isinstance(a, Var):
        return _sigma_np(_as_matrix(a))
    return a.tape._push("sigma", (a.index,), _sigma_np(a.value))


def sigma_tanh(a):
    """``(sigma(a), tanh(a))``; the backward of sigma reuses the tanh values."""
    if not isinstance(a, Var):
        a = _as_matrix(a)
        return _sigma_np(a), np.tanh(a)
    s, t = _sigma_np(a.value), np.tanh(a.value)
    tv = a.tape._push("tanh", (a.index,), t)
    sv = a.tape._push("sigma", (a.index,), s, ctx=t)
    return sv, tv


def custom(a, fn: Callable[[np.ndarray], np.ndarray], vjp: Callable[[np.ndarray, np.ndarray], np.ndarray], name="custom"):
    """Wrap a numpy function with a user-supplied vector-Jacobian product.

    ``vjp(g, x)`` receives the output cotangent and the input value.
    """
    if not isinstance(a, Var):
        return fn(_as_matrix(a))
    value = _as_matrix(_compute(name, lambda: fn(a.value)))
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite result in {name}")
    return a.tape._push("custom", (a.index,), value, ctx=vjp)


# ---------------------------------------------------------------------------
# vector-Jacobian products


def _vjp_add(g, node, nodes):
    a, b = (nodes[p].value for p in node.parents)
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(g, node, nodes):
    a, b = (nodes[p].value for p in node.parents)
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_mul(g, node, nodes):
    pa, pb = (nodes[p] for p in node.parents)
    ga = _unbroadcast(g * pb.value, pa.value.shape) if pa.requires_grad else None
    gb = _unbroadcast(g * pa.value, pb.value.shape) if pb.requires_grad else None
    return ga, gb


def _vjp_matmul(g, node, nodes):
    pa, pb = (nodes[p] for p in node.parents)
    ga = g @ pb.value.T if pa.requires_grad else None
    gb = pa.value.T @ g if pb.requires_grad else None
    return ga, gb


def _vjp_sum(g, node, nodes):
    return (np.broadcast_to(g, node.ctx),)


def _vjp_mean(g, node, nodes):
    shape, count = node.ctx
    return (np.broadcast_to(g / count, shape),)


def _vjp_sqnorm(g, node, nodes):
    x = nodes[node.parents[0]].value
    return (2.0 * g * x,)


def _vjp_slice_cols(g, node, nodes):
    start, stop, width = node.ctx
    out = np.zeros((g.shape[0], width))
    out[:, start:stop] = g
    return (out,)


def _vjp_sigma(g, node, nodes):
    t = node.ctx if node.ctx is not None else np.tanh(nodes[node.parents[0]].value)
    return (g * t,)


def _vjp_tanh(g, node, nodes):
    t = node.value
    return (g * (1.0 - t * t),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": lambda g, node, nodes: (g * node.ctx,),
    "matmul": _vjp_matmul,
    "transpose": lambda g, node, nodes: (g.T,),
    "slice_cols": _vjp_slice_cols,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "sqnorm": _vjp_sqnorm,
    "square": lambda g, node, nodes: (2.0 * g * nodes[node.parents[0]].value,),
    "exp": lambda g, node, nodes: (g * node.value,),
    "log": lambda g, node, nodes: (g / nodes[node.parents[0]].value,),
    "reciprocal": lambda g, node, nodes: (-g * node.value * node.value,),
    "tanh": _vjp_tanh,
    "sigma": _vjp_sigma,
    "custom": lambda g, node, nodes: (node.ctx(g, nodes[node.parents[0]].value),),
}


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(
    fn: Callable[[Tape, dict[str, Var]], Var],
    point: dict[str, np.ndarray] | np.ndarray,
    step: float = 1e-5,
    coords: Sequence[tuple[str, tuple[int, int]]] | None = None,
    plain: bool = False,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn(tape, leaves)`` must build a scalar on ``tape`` from the leaf
    variables. The relative error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``. ``coords`` restricts the check to
    selected ``(name, index)`` entries; by default every entry is checked.
    With ``plain=True`` the perturbed evaluations call ``fn(None, arrays)``
    without a tape, which is faster for functions that accept raw arrays.
    """
    rows = finite_diff_report(fn, point, step, coords, plain)
    return max((r[4] for r in rows), default=0.0)


def finite_diff_report(
    fn: Callable[[Tape, dict[str, Var]], Var],
    point: dict[str, np.ndarray] | np.ndarray,
    step: float = 1e-5,
    coords: Sequence[tuple[str, tuple[int, int]]] | None = None,
    plain: bool = False,
) -> list[tuple[str, tuple[int, int], float, float, float]]:
    """Per-coordinate ``(name, index, analytic, central, relative error)`` rows."""
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(point, np.ndarray) or not isinstance(point, dict):
        point = {"x": _as_matrix(point)}
    point = {k: _as_matrix(v, copy=True) for k, v in point.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        return tape, fn(tape, leaves)

    def scalar(values) -> float:
        if plain:
            return float(np.asarray(value_of(fn(None, values))).item())
        return evaluate(values)[1].item()

    tape, root = evaluate(point)
    grads = tape.backward(root)
    if coords is None:
        coords = [(k, idx) for k, v in point.items() for idx in np.ndindex(v.shape)]
    rows = []
    for name, idx in coords:
        plus = {k: v.copy() for k, v in point.items()}
        minus = {k: v.copy() for k, v in point.items()}
        plus[name][idx] += step
        minus[name][idx] -= step
        fp = scalar(plus)
        fm = scalar(minus)
        central = (fp - fm) / (2.0 * step)
        analytic = float(grads[name][idx])
        err = abs(analytic - central) / (abs(analytic) + abs(central) + 1e-12)
        rows.append((name, tuple(idx), analytic, central, err))
    return rows
