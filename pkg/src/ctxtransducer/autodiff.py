"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor` wrapping an immutable ``numpy`` array.  Ops
record their parents and a backward closure only when at least one input
requires a gradient, so inference paths carry no graph overhead.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a python scalar, or a vector matching the trailing dimension.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class NumericOverflowError(FloatingPointError):
    """A non-finite value was produced inside the expression graph."""

    def __init__(self, op: str):
        super().__init__(f"numeric overflow: non-finite output in op '{op}'")
        self.op = op


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return total(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], Sequence], op: str) -> Tensor:
    """Wrap an op result, recording the graph edge if any parent needs a gradient.

    ``backward_fn`` maps the upstream gradient to one gradient (or ``None``)
    per parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed keeps the visiting order equal to parent declaration order
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericOverflowError(f"{node.op} (backward)")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise binary ops


def _check_binary(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "trailing"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    kind = _check_binary(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, kind) if b.requires_grad else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        return add(mul(b, -1.0), a)
    kind = _check_binary(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, kind) if b.requires_grad else None), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    kind = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (g * bd if a.requires_grad else None, _reduce_to(g * ad, kind) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``b`` is 2-D (shared weights) or batched like ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), back, "matmul")


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """(T, J) and (U, J) -> (T, U, J) with out[t, u] = a[t] + b[u]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"outer_add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data[:, None, :] + b.data[None, :, :]
    return make_op(out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)), "outer_add")


# ---------------------------------------------------------------------------
# elementwise unary ops


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return make_op(y, (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------------------
# reductions and normalisations


def _logsumexp_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def logsumexp(x, axis: int = -1):
    """Shifted-max log-sum-exp along ``axis``.

    Accepts a Tensor (differentiable) or any array-like; plain inputs return a
    float or ndarray.
    """
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=DTYPE)
        if arr.size == 0:
            raise ValueError("logsumexp of an empty vector")
        out = _logsumexp_np(arr, axis)
        return float(out) if np.ndim(out) == 0 else out
    if x.data.size == 0:
        raise ValueError("logsumexp of an empty vector")
    out = _logsumexp_np(x.data, axis)

    def back(g):
        w = np.exp(x.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * w,)

    return make_op(out, (x,), back, "logsumexp")


def log_softmax(x, axis: int = -1):
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=DTYPE)
        if arr.size == 0:
            raise ValueError("log_softmax of an empty vector")
        return arr - np.expand_dims(_logsumexp_np(arr, axis), axis)
    if x.data.size == 0:
        raise ValueError("log_softmax of an empty vector")
    y = x.data - np.expand_dims(_logsumexp_np(x.data, axis), axis)

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_op(y, (x,), back, "log_softmax")


def masked_softmax(scores: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis with disallowed positions (mask False) zeroed.

    Every row must keep at least one allowed position.
    """
    s = scores.data
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_op(p, (scores,), back, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return make_op(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def add_n(terms: Iterable[Tensor]) -> Tensor:
    terms = [as_tensor(t) for t in terms]
    if not terms:
        raise ValueError("add_n of no terms")
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ShapeError(f"add_n: shape {t.shape} != {shape}")
    out = np.sum([t.data for t in terms], axis=0) if len(terms) > 1 else terms[0].data.copy()
    return make_op(out, tuple(terms), lambda g: (g,) * len(terms), "add_n")


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def take_slice(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing (gather); gradients scatter-add back."""
    shape = x.shape
    out = x.data[index]

    fancy = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index))

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_op(np.array(out, dtype=DTYPE), (x,), back, "gather")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    return take_slice(table, np.asarray(ids, dtype=np.intp))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named float64 arrays shared by every forward pass of a model.

    Arrays are replaced, never mutated in place; ``version`` increments on each
    update so readers can detect staleness.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, step: int = 0):
        self._arrays: dict[str, np.ndarray] = {}
        self.version = 0
        self.step = step
        for name, value in (arrays or {}).items():
            self.create(name, value)

    def create(self, name: str, value) -> None:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=DTYPE)
        arr.flags.writeable = False
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def num_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def update(self, new_values: Mapping[str, np.ndarray]) -> None:
        for name, value in new_values.items():
            if name not in self._arrays:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.array(value, dtype=DTYPE)
            if arr.shape != self._arrays[name].shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {self._arrays[name].shape}")
            arr.flags.writeable = False
            self._arrays[name] = arr
        self.version += 1

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad) for name, arr in self._arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return self.leaves(requires_grad=False)


def evaluate_with_gradients(fn: Callable[[dict[str, Tensor]], Tensor], store: ParameterStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate scalar ``fn(params)`` and its gradient w.r.t. every parameter."""
    leaves = store.leaves()
    out = fn(leaves)
    if out.data.size != 1:
        raise ShapeError(f"expected a scalar expression, got shape {out.shape}")
    backward(out)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()}
    return float(out.data), grads


def finite_difference_check(fn: Callable[[dict[str, Tensor]], Tensor], store: ParameterStore,
                            step: float | Sequence[float] = 1e-4, floor: float = 1e-6,
                            names: Iterable[str] | None = None, points: int = 2) -> float:
    """Largest elementwise relative error between analytic and finite-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  ``points`` selects
    the central stencil: 2 (error O(h^2)) or 4 (error O(h^4)).  With several
    step sizes each element keeps its smallest error: a large step can straddle
    a relu kink and a small one drowns in rounding, but a wrong analytic
    gradient disagrees at every step.
    """
    if points == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif points == 4:
        stencil = ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12))
    else:
        raise ValueError("points must be 2 or 4")
    steps = [step] if np.isscalar(step) else list(step)
    _, grads = evaluate_with_gradients(fn, store)
    worst = 0.0
    for name in names or store.names():
        base = store[name]
        best = np.full(base.shape, np.inf)
        for h in steps:
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                total = 0.0
                for shift, weight in stencil:
                    bumped = base.copy()
                    bumped[idx] += shift * h
                    trial = {n: Tensor(store[n]) for n in store.names()}
                    trial[name] = Tensor(bumped)
                    total += weight * float(fn(trial).data)
                numeric[idx] = total / h
            denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(numeric)), floor)
            best = np.minimum(best, np.abs(grads[name] - numeric) / denom)
        worst = max(worst, float(best.max()) if best.size else 0.0)
    return worst
