"""Minimal deterministic reverse-mode differentiation on float64 numpy arrays.

Every tensor tracks the op and parents that produced it; `backward` walks the
graph in reverse creation order, which is a valid reverse topological order
because an op's output is always created after its inputs. Creation order is
deterministic, so gradient accumulation is bit-reproducible.
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _as_array(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


class DiffTensor:
    """Node in the reverse-mode graph: a value plus an accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_vjps", "node_id")

    def __init__(self, values, requires_grad=False, op="leaf", parents=(), vjps=()):
        self.values = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self.parents = tuple(parents)
        self._vjps = tuple(vjps)
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # first contribution adopts the array; later ones add out-of-place so
        # a vjp result aliasing a child's grad is never mutated
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=False)


def parameter(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=True)


def _require_same_shape(kind, a, b):
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(
            f"{kind}: shapes {tuple(a.values.shape)} and {tuple(b.values.shape)} differ"
        )


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape("add", a, b)
    return DiffTensor(a.values + b.values, op="add", parents=(a, b),
                      vjps=(lambda g: g, lambda g: g))


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape("sub", a, b)
    return DiffTensor(a.values - b.values, op="sub", parents=(a, b),
                      vjps=(lambda g: g, lambda g: -g))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape("elementwise-mul", a, b)
    av, bv = a.values, b.values
    return DiffTensor(av * bv, op="elementwise-mul", parents=(a, b),
                      vjps=(lambda g: g * bv, lambda g: g * av))


def square(a: DiffTensor) -> DiffTensor:
    av = a.values
    return DiffTensor(av * av, op="square", parents=(a,),
                      vjps=(lambda g: 2.0 * av * g,))


def relu(a: DiffTensor) -> DiffTensor:
    positive = a.values > 0.0
    return DiffTensor(np.maximum(a.values, 0.0), op="relu", parents=(a,),
                      vjps=(lambda g: g * positive,))


def sum_reduce(a: DiffTensor) -> DiffTensor:
    av = a.values
    return DiffTensor(np.array([av.sum()]), op="sum-reduce", parents=(a,),
                      vjps=(lambda g: np.full_like(av, g[0]),))


def mean_reduce(a: DiffTensor) -> DiffTensor:
    av = a.values
    n = av.size
    return DiffTensor(np.array([av.mean()]), op="mean-reduce", parents=(a,),
                      vjps=(lambda g: np.full_like(av, g[0] / n),))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product. Supports 2-D x 2-D, batched-left ([..., n, k] @ [k, m])
    and batched-right ([n, k] @ [..., k, m]) so whole sample batches go through
    a single gemm."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: shapes {tuple(av.shape)} and {tuple(bv.shape)} are incompatible"
        )
    if av.ndim == 2 and bv.ndim == 2:
        out = av @ bv
        vjps = (lambda g: g @ bv.T, lambda g: av.T @ g)
    elif bv.ndim == 2:
        k, m = bv.shape
        flat = av.reshape(-1, k)
        out = (flat @ bv).reshape(av.shape[:-1] + (m,))

        def d_left(g, _flat=flat, _bt=bv.T, _shape=av.shape, _m=m):
            return (g.reshape(-1, _m) @ _bt).reshape(_shape)

        def d_right(g, _flat=flat, _m=m):
            return _flat.T @ g.reshape(-1, _m)

        vjps = (d_left, d_right)
    elif av.ndim == 2:
        out = np.matmul(av, bv)

        def d_left(g, _bv=bv):
            prod = np.matmul(g, np.swapaxes(_bv, -1, -2))
            return prod.reshape((-1,) + prod.shape[-2:]).sum(axis=0)

        def d_right(g, _at=av.T):
            return np.matmul(_at, g)

        vjps = (d_left, d_right)
    else:
        raise ShapeMismatchError(
            f"matmul: shapes {tuple(av.shape)} and {tuple(bv.shape)} are incompatible"
        )
    return DiffTensor(out, op="matmul", parents=(a, b), vjps=vjps)


def broadcast_mul(column: DiffTensor, feats: DiffTensor) -> DiffTensor:
    """Scale the rows of `feats` by a [N, 1] column. The column gradient is the
    per-row inner product of features with the upstream gradient, which stays
    nonzero even where the column itself is zero."""
    cv, fv = column.values, feats.values
    if cv.ndim != 2 or cv.shape[1] != 1 or fv.ndim < 2 or fv.shape[-2] != cv.shape[0]:
        raise ShapeMismatchError(
            f"broadcast-mul: shapes {tuple(cv.shape)} and {tuple(fv.shape)} are incompatible"
        )

    def d_column(g, _fv=fv):
        prod = g * _fv
        return prod.reshape((-1,) + prod.shape[-2:]).sum(axis=0).sum(axis=1).reshape(-1, 1)

    def d_feats(g, _cv=cv):
        return g * _cv

    return DiffTensor(cv * fv, op="broadcast-mul", parents=(column, feats),
                      vjps=(d_column, d_feats))


_UNARY = {
    "relu": relu,
    "mean-reduce": mean_reduce,
    "sum-reduce": sum_reduce,
    "square": square,
}
_BINARY = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "matmul": matmul,
    "broadcast-mul": broadcast_mul,
}


def tensor_op(kind: str, inputs) -> DiffTensor:
    """Apply one of the nine named primitives to a list of DiffTensors."""
    inputs = list(inputs)
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ValueError(f"{kind} takes exactly one input, got {len(inputs)}")
        return _UNARY[kind](inputs[0])
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ValueError(f"{kind} takes exactly two inputs, got {len(inputs)}")
        return _BINARY[kind](inputs[0], inputs[1])
    raise ValueError(f"unknown op kind: {kind!r}")


def backward(loss: DiffTensor) -> None:
    """Accumulate dLoss/dT into .grad of every requires-grad ancestor of `loss`.

    The loss must be scalar (a single element). Traversal follows strictly
    decreasing creation ids, so repeated runs produce bit-identical gradients.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    seen: dict[int, DiffTensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        for parent in node.parents:
            if parent.requires_grad:
                stack.append(parent)
    loss.accumulate_grad(np.ones_like(loss.values))
    for node in sorted(seen.values(), key=lambda n: n.node_id, reverse=True):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            if parent.requires_grad:
                parent.accumulate_grad(vjp(node.grad))
