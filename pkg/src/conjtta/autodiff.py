"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps an immutable ``numpy`` array.  Operations on tensors
record their parents and a local backward rule; :func:`backward` walks the
resulting graph in reverse topological order.  Broadcasting follows numpy,
and gradients are summed back to the operand shape.

Plain-array helpers :func:`logsumexp` and :func:`softmax` are provided for
callers that only need values.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "grad",
    "grad_check",
    "logsumexp",
    "softmax",
    "solve",
    "topological_order",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A node of the computation graph.

    Leaves are created directly; every other node is produced by an
    operation and remembers its ``parents`` and ``backward_fn``.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, parents=(), backward_fn=None, op="leaf"):
        if op == "leaf":
            data = np.array(data, dtype=np.float64)
            data.flags.writeable = False
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @classmethod
    def _node(cls, data, parents, backward_fn, op):
        needs = any(p.requires_grad for p in parents)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        if not needs:
            return cls._const(data, op)
        return cls(data, True, parents=parents, backward_fn=backward_fn, op=op)

    @classmethod
    def _const(cls, data, op="const"):
        return cls(data, False, op=op)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same value, cut from the graph (treated as a constant)."""
        return Tensor._const(self.data, "detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._node(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._node(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._node(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        need_x, need_y = self.requires_grad, other.requires_grad

        def bw(g):
            if x.ndim == 1 and y.ndim == 1:
                return g * y, g * x
            gx = gy = None
            if y.ndim == 1:
                if need_x:
                    gx = np.multiply.outer(g, y) if x.ndim == 2 else g[..., None] * y
                if need_y:
                    gy = x.T @ g if x.ndim == 2 else np.tensordot(g, x, axes=g.ndim)
                return gx, gy
            if need_x:
                gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
            if need_y:
                gy = np.swapaxes(x, -1, -2) @ g if x.ndim > 1 else np.multiply.outer(x, g)
                gy = _unbroadcast(gy, y.shape)
            return gx, gy

        return Tensor._node(x @ y, (self, other), bw, "matmul")

    # -- unary functions ---------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), lambda g: (g / x,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        x = self.data
        out = np.exp(-np.logaddexp(0.0, -x))
        return Tensor._node(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self):
        mask = self.data > 0
        return Tensor._node(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        x = self.data
        if x.shape[axis] == 0:
            raise DimensionError("logsumexp of an empty axis")
        m = np.max(x, axis=axis, keepdims=True)
        lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
        p = np.exp(x - lse)
        out = lse if keepdims else np.squeeze(lse, axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * p,)

        return Tensor._node(out, (self,), bw, "logsumexp")

    def log_softmax(self, axis: int = -1):
        return self - self.logsumexp(axis=axis, keepdims=True)

    def softmax(self, axis: int = -1):
        return self.log_softmax(axis).exp()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self):
        return Tensor._node(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._node(self.data[idx], (self,), bw, "index")


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor._const(np.asarray(x, dtype=np.float64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def solve(a: Tensor, b: Tensor) -> Tensor:
    """Batched linear solve ``a @ x = b`` (LAPACK partial-pivoting LU).

    ``a`` has shape ``(..., k, k)`` and ``b`` shape ``(..., k, m)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    try:
        x = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as exc:
        cond = float(np.max(np.linalg.cond(a.data)))
        raise NumericalError(f"singular linear system (condition estimate {cond:.3g})") from exc

    def bw(g):
        gb = np.linalg.solve(np.swapaxes(a.data, -1, -2), g)
        ga = -gb @ np.swapaxes(x, -1, -2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._node(x, (a, b), bw, "solve")


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None, cotangent=None) -> dict:
    """Reverse-mode sweep from a scalar ``output``.

    Returns a mapping ``leaf -> gradient`` for ``leaves`` (default: every
    differentiable leaf reachable from ``output``).  Leaves that do not
    influence ``output`` get zero gradients.  A non-scalar ``output`` needs
    an explicit ``cotangent`` of the same shape (vector-Jacobian product).
    """
    if cotangent is None:
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        cotangent = np.ones_like(output.data)
    else:
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise DimensionError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    found: list[Tensor] = []
    if output.requires_grad:
        order = topological_order(output)
        grads[id(output)] = cotangent
        for node in reversed(order):
            g = grads.get(id(node))
            if node.backward_fn is None:
                if node.op == "leaf":
                    found.append(node)
                continue
            if g is None:
                continue
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if not p.requires_grad or gp is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    targets = found if leaves is None else list(leaves)
    return {t: np.array(grads.get(id(t), np.zeros(t.shape)), dtype=np.float64).reshape(t.shape) for t in targets}


def grad(output: Tensor, leaves: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
    """Gradients of ``output`` with respect to each of ``leaves``, in order."""
    res = backward(output, leaves, cotangent)
    return [res[t] for t in leaves]


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("empty input")
    return v


def logsumexp(v) -> float:
    """``log(sum(exp(v)))`` with max-subtraction."""
    v = _as_vector(v)
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


def softmax(v) -> np.ndarray:
    v = _as_vector(v)
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the reverse-mode gradient of ``fn`` and
    central finite differences at ``point``.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = fn(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("non-finite function value at the base point")
    (analytic,) = grad(out, [leaf])
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        e = np.zeros(x0.size)
        e[i] = step
        e = e.reshape(x0.shape)
        hi = fn(Tensor(x0 + e)).item()
        lo = fn(Tensor(x0 - e)).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError(f"non-finite function value probing coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
