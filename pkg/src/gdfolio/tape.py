"""
Minimal reverse-mode automatic differentiation over dense vectors and scalars.

Graphs are built symbolically from :func:`input` and :func:`constant` leaves and
the primitive functions below, then evaluated with :func:`forward` and
differentiated with :func:`backward`::

    x = tape.input("x")
    y = tape.relu(x - 0.1) * 2.0
    tape.forward(y, {x: np.array([0.05, 0.3])})
    grads = tape.backward(tape.sum(y))
    grads[x]  # -> array([0., 2.])

Values are numpy arrays of shape ``()`` (scalars) or ``(n,)`` (vectors). Binary
operations broadcast scalars against vectors and nothing else.

Two primitives carry a surrogate (non-exact) backward rule: ``round_sigmoid``
(straight-through: the derivative of the unrounded sigmoid) and ``sparsemax``
(the Jacobian of the simplex projection, exact almost everywhere).
"""

from __future__ import annotations

import builtins
import functools
from typing import Callable

import numpy as np

from .errors import EvaluationError, ShapeError, UsageError

__all__ = [
    "Node", "input", "constant", "forward", "backward", "finite_difference",
    "add", "sub", "mul", "div", "neg", "exp", "log", "abs", "relu", "sigmoid",
    "sum", "mean", "std", "max", "matvec", "percentile", "round_sigmoid",
    "sparsemax", "lift", "evaluate",
]


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "parents", "attrs", "name", "value", "grad", "aux", "_order")
    # make ``ndarray <op> Node`` defer to the reflected Node operator
    __array_ufunc__ = None

    def __init__(self, op: str, parents: tuple = (), attrs: dict | None = None,
                 name: str | None = None):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.name = name
        self.value = None
        self.grad = None
        self.aux = None
        self._order = None

    @property
    def label(self) -> str:
        return f"{self.name!r} ({self.op})" if self.name else self.op

    def __repr__(self):
        return f"Node({self.label})"

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

    def __neg__(self):
        return neg(self)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim > 1:
        raise ShapeError(f"tape values must be scalars or vectors, got shape {arr.shape}")
    return arr


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def input(name: str) -> Node:  # noqa: A001 - mirrors the op-kind name
    """Create a trainable leaf; its value is supplied through ``forward`` bindings."""
    return Node("input", name=name)


def constant(value, name: str | None = None) -> Node:
    node = Node("const", name=name)
    node.value = _as_array(value)
    return node


# ---------------------------------------------------------------------------
# graph construction

def _binary(op):
    def build(a, b, name=None):
        return Node(op, (_wrap(a), _wrap(b)), name=name)
    build.__name__ = op
    return build


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")


def div(a, b, name: str | None = None, zero_message: str | None = None) -> Node:
    """Elementwise quotient; ``zero_message`` replaces the generic error on a zero denominator."""
    return Node("div", (_wrap(a), _wrap(b)), {"zero_message": zero_message}, name)


def _unary(op):
    def build(x, name=None):
        return Node(op, (_wrap(x),), name=name)
    build.__name__ = op
    return build


neg = _unary("neg")
exp = _unary("exp")
log = _unary("log")
abs = _unary("abs")  # noqa: A001
relu = _unary("relu")
sigmoid = _unary("sigmoid")
sum = _unary("sum")  # noqa: A001
mean = _unary("mean")
std = _unary("std")
max = _unary("max")  # noqa: A001
sparsemax = _unary("sparsemax")


def matvec(matrix, x, name: str | None = None) -> Node:
    """Product of a constant matrix with a vector node."""
    matrix = np.array(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ShapeError(f"matvec needs a 2-d matrix, got shape {matrix.shape}")
    return Node("matvec", (_wrap(x),), {"matrix": matrix}, name)


def percentile(x, q: float, name: str | None = None) -> Node:
    """Linearly interpolated percentile, ``q`` in [0, 100]."""
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile q must lie in [0, 100], got {q}")
    return Node("percentile", (_wrap(x),), {"q": float(q)}, name)


def round_sigmoid(x, decimals: int = 0, name: str | None = None) -> Node:
    if decimals < 0:
        raise ValueError("decimals must be >= 0")
    return Node("round-sigmoid", (_wrap(x),), {"decimals": int(decimals)}, name)


# ---------------------------------------------------------------------------
# kernels

def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sparsemax_kernel(z: np.ndarray) -> np.ndarray:
    """Sort-based sparsemax: ``[z - tau]_+`` with the support-size rule."""
    z = np.asarray(z, dtype=float)
    srt = np.sort(z)[::-1]
    csum = np.cumsum(srt)
    ks = np.arange(1, z.size + 1)
    k = ks[1.0 + ks * srt > csum][-1]
    tau = (csum[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def sparsemax_vjp_kernel(w: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    support = w > 0
    g = np.asarray(upstream, dtype=float)
    return np.where(support, g - g[support].mean(), 0.0)


def _round_sigmoid_forward(x, decimals):
    s = _sigmoid(x)
    if decimals == 0:
        # round-half-up of the exact sigmoid is 1 iff x >= 0; deciding on the
        # sign avoids sigmoid saturating to 0.5 for |x| below ~1e-16
        out = (x >= 0).astype(float)
    else:
        scale = 10.0 ** decimals
        out = np.floor(s * scale + 0.5) / scale
    return out, s


def _percentile_plan(x, q):
    n = x.size
    rank = q / 100.0 * (n - 1)
    nearest = round(rank)
    if builtins.abs(rank - nearest) < 1e-12:
        rank = float(nearest)
    lo = int(np.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    order = np.argsort(x, kind="stable")
    return order, lo, hi, frac


def _check_binary_shapes(node, a, b):
    if a.ndim == 1 and b.ndim == 1 and a.shape != b.shape:
        raise ShapeError(f"length mismatch at node {node.label}: {a.shape[0]} vs {b.shape[0]}")


def _fwd_div(node, a, b):
    _check_binary_shapes(node, a, b)
    if np.any(b == 0):
        msg = node.attrs.get("zero_message")
        raise EvaluationError(msg or f"division by zero at node {node.label}")
    return a / b


def _fwd_log(node, a):
    if np.any(a <= 0):
        raise EvaluationError(f"log of nonpositive value at node {node.label}")
    return np.log(a)


def _fwd_std(node, a):
    return np.sqrt(np.mean((a - a.mean()) ** 2))


def _fwd_matvec(node, x):
    m = node.attrs["matrix"]
    if x.ndim != 1 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec at node {node.label}: matrix {m.shape} vs vector {x.shape}")
    return m @ x


def _fwd_percentile(node, x):
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"percentile at node {node.label} needs a non-empty vector")
    order, lo, hi, frac = _percentile_plan(x, node.attrs["q"])
    node.aux = (order, lo, hi, frac)
    s = x[order]
    return np.asarray(s[lo] + frac * (s[hi] - s[lo]))


def _fwd_round_sigmoid(node, x):
    out, s = _round_sigmoid_forward(x, node.attrs["decimals"])
    node.aux = s
    return out


def _fwd_elementwise_binary(fn):
    def run(node, a, b):
        _check_binary_shapes(node, a, b)
        return fn(a, b)
    return run


_FORWARD: dict[str, Callable] = {
    "add": _fwd_elementwise_binary(np.add),
    "sub": _fwd_elementwise_binary(np.subtract),
    "mul": _fwd_elementwise_binary(np.multiply),
    "div": _fwd_div,
    "neg": lambda node, a: -a,
    "exp": lambda node, a: np.exp(a),
    "log": _fwd_log,
    "abs": lambda node, a: np.abs(a),
    "relu": lambda node, a: np.maximum(a, 0.0),
    "sigmoid": lambda node, a: _sigmoid(a),
    "sum": lambda node, a: np.asarray(np.sum(a)),
    "mean": lambda node, a: np.asarray(np.mean(a)),
    "std": _fwd_std,
    "max": lambda node, a: np.asarray(np.max(a)),
    "matvec": _fwd_matvec,
    "percentile": _fwd_percentile,
    "round-sigmoid": _fwd_round_sigmoid,
    "sparsemax": lambda node, a: sparsemax_kernel(a),
}


def _unbroadcast(g, shape):
    if shape == () and np.ndim(g) != 0:
        return np.asarray(np.sum(g))
    return g


def _bwd_add(node, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_sub(node, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bwd_mul(node, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_div(node, g, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _bwd_std(node, g, a):
    sd = node.value
    if sd == 0:
        return (np.zeros_like(a),)
    return (g * (a - a.mean()) / (a.size * sd),)


def _bwd_max(node, g, a):
    out = np.zeros_like(a)
    out[np.argmax(a)] = g
    return (out,)


def _bwd_percentile(node, g, x):
    order, lo, hi, frac = node.aux
    out = np.zeros_like(x)
    out[order[lo]] += (1.0 - frac) * g
    out[order[hi]] += frac * g
    return (out,)


def _bwd_round_sigmoid(node, g, x):
    s = node.aux
    return (g * s * (1.0 - s),)


_BACKWARD: dict[str, Callable] = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "neg": lambda node, g, a: (-g,),
    "exp": lambda node, g, a: (g * node.value,),
    "log": lambda node, g, a: (g / a,),
    "abs": lambda node, g, a: (g * np.sign(a),),
    "relu": lambda node, g, a: (g * (a > 0),),
    "sigmoid": lambda node, g, a: (g * node.value * (1.0 - node.value),),
    "sum": lambda node, g, a: (np.full_like(a, g),),
    "mean": lambda node, g, a: (np.full_like(a, g / a.size),),
    "std": _bwd_std,
    "max": _bwd_max,
    "matvec": lambda node, g, x: (node.attrs["matrix"].T @ g,),
    "percentile": _bwd_percentile,
    "round-sigmoid": _bwd_round_sigmoid,
    "sparsemax": lambda node, g, a: (sparsemax_vjp_kernel(node.value, g),),
}


# ---------------------------------------------------------------------------
# evaluation

def _topological(root: Node) -> list[Node]:
    if root._order is not None:
        return root._order
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    root._order = order
    return order


def forward(root: Node, bindings: dict | None = None) -> np.ndarray:
    """Evaluate ``root``; ``bindings`` maps input nodes to their values."""
    for node, value in (bindings or {}).items():
        if node.op != "input":
            raise UsageError(f"only input nodes can be bound, got {node.label}")
        node.value = _as_array(value)
        if not np.all(np.isfinite(node.value)):
            raise EvaluationError(f"non-finite binding for input {node.label}")
    order = _topological(root)
    with np.errstate(all="ignore"):
        for node in order:
            node.grad = None
            if node.op in ("input", "const"):
                if node.value is None:
                    raise UsageError(f"unbound input {node.label}")
                continue
            value = _FORWARD[node.op](node, *(p.value for p in node.parents))
            value = np.asarray(value, dtype=float)
            if not np.all(np.isfinite(value)):
                raise EvaluationError(f"non-finite value at node {node.label}")
            node.value = value
    root.attrs["_evaluated"] = True
    return root.value


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate adjoints of ``root`` into every reachable node.

    Returns the gradient of each (non-constant) input node.
    """
    if not root.attrs.get("_evaluated"):
        raise UsageError("backward() called before forward() on this graph")
    order = _topological(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    with np.errstate(all="ignore"):
        for node in reversed(order):
            if not node.parents:
                continue
            grads = _BACKWARD[node.op](node, node.grad, *(p.value for p in node.parents))
            for parent, g in zip(node.parents, grads):
                parent.grad = parent.grad + g
    out = {}
    for node in order:
        if node.op == "input":
            if not np.all(np.isfinite(node.grad)):
                raise EvaluationError(f"non-finite adjoint at input {node.label}")
            out[node] = node.grad
    return out


def finite_difference(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (float(f(up)) - float(f(down))) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# numeric convenience

def evaluate(node: Node):
    """Forward a graph without free inputs and return a float or an array."""
    value = forward(node)
    return float(value) if value.ndim == 0 else value


def lift(n_inputs: int):
    """Let a graph builder also accept plain arrays.

    The first ``n_inputs`` positional arguments are graph operands. If none of
    them is a :class:`Node`, they are wrapped as constants, the graph is
    evaluated on the spot and a float (or array) is returned. Otherwise the
    node is returned for later evaluation.
    """
    def decorate(builder):
        @functools.wraps(builder)
        def wrapper(*args, **kwargs):
            operands = args[:n_inputs]
            if any(isinstance(a, Node) for a in operands):
                return builder(*args, **kwargs)
            consts = tuple(constant(a) for a in operands)
            return evaluate(builder(*consts, *args[n_inputs:], **kwargs))
        return wrapper
    return decorate
