"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every operation on :class:`Tensor` records its parents and a closure that
maps the output gradient to parent gradients. :func:`backward` walks the
recorded graph in reverse creation order. Broadcasting is deliberately
restricted: elementwise operands must share a shape or one of them must be a
scalar. Anything else goes through the explicit :func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DefinitenessError, DimensionError, DomainError, NumericError

_ids = itertools.count()
_debug = False


def set_debug(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if not _parents and not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.parents: tuple[Tensor, ...] = tuple(_parents)
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = _op
        self.node_id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op {op!r}")
    tracked = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = tracked
    out.parents = tuple(parents) if tracked else ()
    out.backward_fn = backward if tracked else None
    out.op = op
    out.node_id = next(_ids)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a), _unbroadcast(-g * out / bd, b)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: non-positive input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def absolute(a) -> Tensor:
    """|a|; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "neg": neg, "sqrt": sqrt, "relu": relu, "tanh": tanh,
}


def elementwise(tag: str, *operands) -> Tensor:
    try:
        fn = ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {tag!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands
    with equal leading extent."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs rank >= 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def diagonal(a) -> Tensor:
    """Diagonal over the last two (square) axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise DimensionError(f"diagonal: shape {a.shape} is not square in its last two axes")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)

    return _make(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), backward, "diagonal")



def logdet(a) -> Tensor:
    """log det of a symmetric positive-definite matrix (or a stack of them
    along the leading axis) via Cholesky. The gradient is ``inv(A)``."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"logdet: shape {a.shape} is not square in its last two axes")
    try:
        chol = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError:
        raise DefinitenessError("logdet: matrix is not positive definite") from None
    out = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)

    def backward(g):
        inv = np.linalg.inv(a.data)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        return (np.asarray(g)[..., None, None] * inv,)

    return _make(out, (a,), backward, "logdet")

# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(a: Tensor, axis) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    if (a.size == 0) or (axis is not None and a.shape[axis] == 0):
        raise DomainError("reduction over an empty axis")


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def reduce_max(a, axis: int | None = None) -> Tensor:
    """Max reduction. Ties send the whole gradient to the first maximizer."""
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        flat = int(np.argmax(a.data))
        out = np.asarray(a.data.reshape(-1)[flat])

        def backward(g):
            full = np.zeros(a.size)
            full[flat] = g
            return (full.reshape(shape),)
    else:
        arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros(shape)
            np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
            return (full,)

    return _make(out, (a,), backward, "max")


REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(tag: str, t, axis: int | None = None) -> Tensor:
    try:
        fn = REDUCTIONS[tag]
    except KeyError:
        raise ContractError(f"unknown reduction {tag!r}") from None
    return fn(t, axis)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over the
    broadcast axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), backward, "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def index(a, key) -> Tensor:
    """numpy indexing (basic or integer-array); duplicate indices accumulate."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), (a,), backward, "index")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def graph(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in creation order (parents first)."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` that ``loss``
    depends on. Repeated calls accumulate into existing grads."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("backward from a non-finite loss")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


def sgd_step(params: Iterable[Tensor], lr: float, grad_clip: float | None = None) -> float:
    """In-place ``p <- p - lr * g`` with optional global-norm gradient clipping.

    Returns the pre-clip gradient norm.
    """
    params = list(params)
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient")
    norm = grad_norm(params)
    scale = 1.0
    if grad_clip is not None:
        if grad_clip <= 0:
            raise ContractError("grad_clip must be positive")
        if norm > grad_clip:
            scale = grad_clip / norm
    for p in params:
        p.data = p.data - (lr * scale) * p.grad
    return norm


class Adam:
    """Adam with the same global-norm clipping as :func:`sgd_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grad_clip: float | None = None) -> float:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p!r} has no gradient")
        norm = grad_norm(self.params)
        scale = grad_clip / norm if grad_clip is not None and norm > grad_clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
