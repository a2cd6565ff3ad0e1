"""Dense float64 tensors with a reverse-mode gradient tape.

Only what small MLPs need: matmul, broadcasting add/sub/mul, ReLU, tanh,
scaling, concat, reductions, soft-target softmax cross-entropy, and a
column-replacement primitive used by the counterfactual transforms. Every
public operation checks its output for NaN/Inf and raises NonFiniteError.

Example::

    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * w).sum()
    backward(loss)
    w.grad  # array([2., 4.])
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

TARGET_SUM_TOL = 1e-9


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.op = "leaf"
        t._parents = ()
        t._backward = None
        t._freed = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self):
        return sum_all(self)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g, needed):
        return (g @ B.T if needed[0] else None, A.T @ g if needed[1] else None)

    return _record(A @ B, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g, needed):
        return (_unbroadcast(g, sa) if needed[0] else None, _unbroadcast(g, sb) if needed[1] else None)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g, needed):
        return (_unbroadcast(g, sa) if needed[0] else None, _unbroadcast(-g, sb) if needed[1] else None)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data

    def bw(g, needed):
        return (
            _unbroadcast(g * B, A.shape) if needed[0] else None,
            _unbroadcast(g * A, B.shape) if needed[1] else None,
        )

    return _record(A * B, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite factor")

    def bw(g, needed):
        return (g * c,)

    return _record(a.data * c, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0

    def bw(g, needed):
        return (np.where(keep, g, 0.0),)

    return _record(np.where(keep, a.data, 0.0), (a,), bw, "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g, needed):
        return (g * (1.0 - y * y),)

    return _record(y, (a,), bw, "tanh")


def identity(a: Tensor) -> Tensor:
    return a


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needed):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needed))

    return _record(data, tensors, bw, "concat")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g, needed):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.array(a.data.sum()), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size

        def bw(g, needed):
            return (np.full(shape, float(g) / count),)

        return _record(np.array(a.data.mean()), (a,), bw, "mean")
    count = shape[axis]

    def bw_axis(g, needed):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _record(a.data.mean(axis=axis), (a,), bw_axis, "mean")


def check_soft_targets(targets: np.ndarray, tol: float = TARGET_SUM_TOL) -> None:
    if targets.ndim != 2:
        raise ShapeError(f"targets must be 2-D, got shape {targets.shape}")
    _check_finite(targets, "targets")
    if (targets < -tol).any():
        raise ValueError("soft targets must be non-negative")
    err = np.abs(targets.sum(axis=1) - 1.0)
    if (err > tol).any():
        raise ValueError(f"soft target rows must sum to 1 (worst deviation {err.max():.3g})")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean of ``-sum_c y_c log p_c`` with soft targets.

    ``targets`` is treated as a constant (no gradient). Log arguments are
    clamped at 1e-12.
    """
    Y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2 or Y.shape != logits.shape:
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs targets {Y.shape}")
    check_soft_targets(Y)
    loss, dlogits, _ = _kernels.softmax_xent(logits.data, Y)

    def bw(g, needed):
        return (dlogits * float(g),)

    return _record(np.array(loss), (logits,), bw, "softmax_xent")


def replace_columns(F: Tensor, G: Tensor, idx) -> Tensor:
    """Copy of ``F`` whose columns ``idx`` are taken from ``G``.

    Entries outside ``idx`` are bitwise copies of ``F``.
    """
    if F.data.ndim != 2 or F.shape != G.shape:
        raise ShapeError(f"replace_columns: shapes {F.shape} and {G.shape} differ")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= F.shape[1]):
        raise ShapeError("replace_columns: column index out of range")
    out = F.data.copy()
    out[:, idx] = G.data[:, idx]

    def bw(g, needed):
        gf = gg = None
        if needed[0]:
            gf = g.copy()
            gf[:, idx] = 0.0
        if needed[1]:
            gg = np.zeros_like(g)
            gg[:, idx] = g[:, idx]
        return gf, gg

    return _record(out, (F, G), bw, "replace_columns")


def custom_op(inputs: tuple[Tensor, ...], value: np.ndarray, grads_fn: Callable, op: str) -> Tensor:
    """Record an op whose backward is ``grads_fn(upstream, needed) -> tuple``."""
    return _record(np.asarray(value, dtype=np.float64), tuple(inputs), grads_fn, op)


# --------------------------------------------------------------------------
# tape and reverse pass
# --------------------------------------------------------------------------

class Tape:
    """Topologically ordered view of the graph feeding one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)


def _check_scalar_loss(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass")


def _reverse(tape: Tape, seed: np.ndarray, active: set[int] | None = None, stop: Tensor | None = None) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(tape.nodes[-1]): seed}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None or node is stop:
            continue
        parents = node._parents
        needed = tuple(p.requires_grad and (active is None or id(p) in active) for p in parents)
        if not any(needed):
            continue
        for p, pg in zip(parents, node._backward(g, needed)):
            if pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return grads


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf.

    When ``params`` is given, each of them ends up with a populated grad
    (zeros if the loss does not depend on it). The graph is released
    afterwards, so a second call on the same loss raises.
    """
    _check_scalar_loss(loss)
    params = list(params) if params is not None else []
    if not loss.requires_grad:
        if not params:
            raise RuntimeError("loss is not on a tape (no input requires grad)")
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        return
    tape = Tape.from_output(loss)
    grads = _reverse(tape, np.ones_like(loss.data))
    for node in tape.nodes:
        if node.is_leaf:
            g = grads.get(id(node))
            if g is not None:
                g = np.asarray(g, dtype=np.float64).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
        node._parents = ()
        node._backward = None
        node._freed = True
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def grad_wrt_activation(loss: Tensor, activation: Tensor) -> np.ndarray:
    """Return d loss / d activation without touching any ``.grad``.

    The graph is kept intact. Raises if ``activation`` was never recorded
    (neither a grad-requiring leaf nor an op output).
    """
    _check_scalar_loss(loss)
    if not activation.requires_grad:
        raise ValueError("activation is not on a tape")
    if not loss.requires_grad:
        return np.zeros_like(activation.data)
    tape = Tape.from_output(loss)
    # only propagate through nodes that depend on the activation
    active: set[int] = set()
    for node in tape.nodes:
        if node is activation or any(id(p) in active for p in node._parents):
            active.add(id(node))
    if id(activation) not in active or id(loss) not in active:
        return np.zeros_like(activation.data)
    grads = _reverse(tape, np.ones_like(loss.data), active=active, stop=activation)
    return np.asarray(grads.get(id(activation), np.zeros_like(activation.data))).reshape(activation.shape)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
    for p in params:
        new = p.data - lr * p.grad
        _check_finite(new, "sgd_step")
        p.data = new
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "linear": identity,
}
