"""Dense tensors with reverse-mode differentiation of scalar losses.

Every value is a float64 numpy array wrapped in :class:`Tensor`. Operations
record their parents and a backward closure; :func:`grad` walks the recorded
graph in reverse topological order and returns gradients for named leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

SUPPORTED_OPS = frozenset({
    "leaf", "add", "sub", "mul", "div", "neg", "matmul", "spmm", "concat",
    "index", "stack", "reshape", "transpose", "sum", "mean", "exp", "log",
    "sqrt", "sigmoid", "log_sigmoid", "softmax", "prelu", "normalize_rows",
    "dot",
})

# Rows whose norm falls below this are treated as empty (zero in, zero out).
ZERO_ROW_EPS = 1e-12


class UnsupportedOpError(TypeError):
    """Raised when a graph would contain an operation without a backward rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    # numpy ufuncs applied to a Tensor have no backward rule
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} is not a supported op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward: Callable | None = None):
        if op not in SUPPORTED_OPS:
            raise UnsupportedOpError(f"unsupported op {op!r}")
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=needs, op=op, parents=tuple(parents),
                  backward=backward if needs else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without underflow for large negative inputs."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node("log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def prelu(a, slope) -> Tensor:
    """Parametric ReLU with a single learnable slope for the negative side."""
    a, slope = as_tensor(a), as_tensor(slope)
    x = a.data
    neg_mask = x < 0
    out = np.where(neg_mask, slope.data * x, x)

    def backward(g):
        ga = np.where(neg_mask, g * slope.data, g)
        gs = np.sum(g * np.where(neg_mask, x, 0.0))
        return ga, np.reshape(gs, slope.shape)

    return _node("prelu", out, (a, slope), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", out, (a,), backward)


def normalize_rows(a) -> Tensor:
    """L2-normalize along the last axis; rows with (near) zero norm map to zero.

    The backward pass applies the projection ``(I - z z^T) / ||e||`` row-wise.
    """
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    live = norm > ZERO_ROW_EPS
    safe = np.where(live, norm, 1.0)
    z = np.where(live, a.data / safe, 0.0)

    def backward(g):
        radial = np.sum(g * z, axis=-1, keepdims=True)
        return (np.where(live, (g - radial * z) / safe, 0.0),)

    return _node("normalize_rows", z, (a,), backward)


def normalize_jacobian(e: np.ndarray) -> np.ndarray:
    """Dense Jacobian of e -> e/||e|| for a single vector (zero for a zero vector)."""
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e)
    if n <= ZERO_ROW_EPS:
        return np.zeros((e.size, e.size))
    z = e / n
    return (np.eye(e.size) - np.outer(z, z)) / n


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.sum(a.data * b.data, axis=-1)

    def backward(g):
        ge = g[..., None]
        return _unbroadcast(ge * b.data, a.shape), _unbroadcast(ge * a.data, b.shape)

    return _node("dot", out, (a, b), backward)


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of any rank and ``b`` a matrix or vector."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1:
        raise ValueError(f"matmul expects a (...,k) @ (k,m) or (k,); got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    k = a.shape[-1]

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        else:
            ga = g[..., None] * b.data
            gb = a.data.reshape(-1, k).T @ np.reshape(g, -1)
        return ga, gb

    return _node("matmul", out, (a, b), backward)


def spmm(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    s = sp.csr_matrix(s)
    out = np.asarray(s @ x.data)
    st = s.T.tocsr()
    return _node("spmm", out, (x,), lambda g: (np.asarray(st @ g),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# --- structural ------------------------------------------------------------

def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return _node("stack", out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node("index", np.array(out, dtype=np.float64), (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.size(out), 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _node("mean", out, (a,), backward)


# --- differentiation -------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to each named leaf.

    Leaves the loss does not depend on get zero arrays of their own shape.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g
    return out


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'FAIL' if v >= self.tol else 'ok  '} {k:<28s} max_rel_err={v:.3e}"
                for k, v in self.max_rel_error.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Entrywise |a - n| / max(|a|, |n|, floor).

    The floor turns the comparison absolute for entries whose true gradient
    is essentially zero, where a ratio would only measure roundoff.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(loss_builder: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      tol: float = 1e-4,
                      analytic: Mapping[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_builder`` receives a mapping of name -> Tensor leaf and returns a
    scalar Tensor. ``analytic`` overrides the reverse-mode gradients, which is
    how a corrupted gradient can be fed in to confirm the check catches it.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values) -> float:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
        return float(loss_builder(leaves).data)

    if analytic is None:
        leaves = {k: parameter(v, k) for k, v in base.items()}
        analytic = grad(loss_builder(leaves), leaves)

    report = GradCheckReport(eps=eps, tol=tol)
    for name, value in base.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = evaluate(base)
            flat[j] = orig - eps
            down = evaluate(base)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * eps)
        err = relative_error(np.asarray(analytic[name]), numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report
