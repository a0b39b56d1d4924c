"""Dense float32 tensors with reverse-mode automatic differentiation.

One numeric convention for the whole package: row-major float32 arrays,
NCHW layout for images, gradients accumulated with ``+=`` and cleared
explicitly by the optimizer. Every op checks its result for NaN/Inf in a
single fused pass so numerical blowups fail loudly at the op that caused
them.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or degenerate shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph (consumed graph, non-scalar loss...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, what: str) -> None:
    # Single fused pass: any NaN poisons the sum, any Inf survives it.
    # float64 accumulator so large-but-finite sums cannot overflow into
    # a false positive.
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A dense float32 array with optional gradient tracking.

    ``data`` is treated as immutable once wrapped; only the optimizer
    mutates parameter storage, between graph lifetimes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._consumed = False

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph ----------------------------------------------------------

    def detach(self) -> "Tensor":
        """Same storage, no history; gradients stop here."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._grad_fn = None
        out._consumed = False
        return out

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Accumulates dLoss/dLeaf into ``grad`` of every reachable leaf
        that requires grad. The graph is freed afterwards; a second
        backward through the same nodes raises GraphError.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; no graph to differentiate")

        if self._grad_fn is None:
            # Loss is itself a leaf parameter.
            seed = np.ones_like(self.data)
            self.grad = seed if self.grad is None else self.grad + seed
            return

        # Iterative topological sort (training graphs are deep).
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._grad_fn is not None:
                    if p._consumed:
                        raise GraphError("graph already consumed by a previous backward()")
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._grad_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if pg.dtype != np.float32:
                    pg = pg.astype(np.float32)
                if p._grad_fn is not None:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif p.requires_grad:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += pg

        for node in topo:
            node._parents = ()
            node._grad_fn = None
            node._consumed = True

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, what: str) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are live."""
    if data.dtype != np.float32:
        data = data.astype(np.float32)
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p._consumed for p in parents):
        raise GraphError(
            f"{what}: input graph already consumed by backward(); "
            "recompute the value instead of reusing the old node")
    if _grad_enabled and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, da, db, name: str) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from e
    data = fwd(a.data, b.data)
    need_a = a.requires_grad or a._grad_fn is not None
    need_b = b.requires_grad or b._grad_fn is not None
    a_shape, b_shape = a.shape, b.shape
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(da(g, ad, bd), a_shape) if need_a else None
        gb = _unbroadcast(db(g, ad, bd), b_shape) if need_b else None
        return ga, gb

    return make_result(data, (a, b), grad_fn, name)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary(a, b, lambda x, y: x / y,
                       lambda g, x, y: g / y,
                       lambda g, x, y: -g * x / (y * y), "div")


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch by op kind: one of add/sub/mul/div."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=np.float32)
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(np.float32),)

    return make_result(data, (x,), grad_fn, "sum")


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.mean(), dtype=np.float32)
    shape = x.shape
    n = x.size

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()) / n, shape).astype(np.float32),)

    return make_result(data, (x,), grad_fn, "mean")


def tabs(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def grad_fn(g):
        return (g * np.sign(xd),)

    return make_result(np.abs(xd), (x,), grad_fn, "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient is 1 inside [lo, hi], 0 outside."""
    x = _as_tensor(x)
    xd = x.data

    def grad_fn(g):
        mask = ((xd >= lo) & (xd <= hi)).astype(np.float32)
        return (g * mask,)

    return make_result(np.clip(xd, lo, hi), (x,), grad_fn, "clamp")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {shape}") from e

    def grad_fn(g):
        return (g.reshape(old),)

    return make_result(data, (x,), grad_fn, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {x.ndim}")
    inv = tuple(int(a) for a in np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), grad_fn, "permute")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(data, tuple(tensors), grad_fn, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (M,K) @ (K,N)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a = a.requires_grad or a._grad_fn is not None
    need_b = b.requires_grad or b._grad_fn is not None

    def grad_fn(g):
        ga = g @ bd.T if need_a else None
        gb = ad.T @ g if need_b else None
        return ga, gb

    return make_result(ad @ bd, (a, b), grad_fn, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B,M,K) @ (B,K,N)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a = a.requires_grad or a._grad_fn is not None
    need_b = b.requires_grad or b._grad_fn is not None

    def grad_fn(g):
        ga = np.matmul(g, bd.transpose(0, 2, 1)) if need_a else None
        gb = np.matmul(ad.transpose(0, 2, 1), g) if need_b else None
        return ga, gb

    return make_result(np.matmul(ad, bd), (a, b), grad_fn, "bmm")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return make_result(y, (x,), grad_fn, "softmax")


def detach(x: Tensor) -> Tensor:
    return _as_tensor(x).detach()
