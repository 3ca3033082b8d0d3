"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Float64 throughout. Each op records its parents and a pullback closure when
gradients are enabled; ``backward`` replays the records of a Tape (the
topologically ordered graph above a scalar loss) exactly once per node.
Only the shapes the surrogate model needs are supported; there is no
general broadcasting.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

_grad_enabled = True
guard_finite = True  # check every op output for NaN/Inf


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus optional autodiff record."""

    __slots__ = ("values", "requires_grad", "_parents", "_pullback")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._pullback: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _quiet():
    """Overflow surfaces as NonFiniteError via the guard, not as a warning."""
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _make(values: np.ndarray, parents: tuple[Tensor, ...],
          pullback: Callable) -> Tensor:
    if guard_finite and not np.isfinite(values).all():
        raise NonFiniteError("op produced a non-finite value")
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._pullback = pullback
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

    def pullback(g):
        return g @ b.values.T, a.values.T @ g

    with _quiet():
        out = a.values @ b.values
    return _make(out, (a, b), pullback)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a (H,) bias row to an (n, H)
    matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _make(a.values * s, (a,), lambda g: (g * s,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes incompatible: {a.shape} * {b.shape}")

    def pullback(g):
        return g * b.values, g * a.values

    with _quiet():
        out = a.values * b.values
    return _make(out, (a, b), pullback)


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"divide shapes incompatible: {a.shape} / {b.shape}")
    with _quiet():
        out = a.values / b.values

    def pullback(g):
        return g / b.values, -g * out / b.values

    return _make(out, (a, b), pullback)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    with np.errstate(over="ignore"):
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def pullback(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), pullback)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    keep = a.values > 0

    def pullback(g):
        return (g * keep,)

    return _make(np.where(keep, a.values, 0.0), (a,), pullback)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None = None,
            train: bool = True) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) at train time.

    Identity when p == 0 or train is False.
    """
    if not (0.0 <= p < 1.0):
        raise ShapeError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0 or not train:
        return a
    if rng is None:
        raise GradientError("dropout with p > 0 in train mode needs an rng")
    a = _as_tensor(a)
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def pullback(g):
        return (g * mask,)

    return _make(a.values * mask, (a,), pullback)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def pullback(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.values for t in tensors], axis=axis),
                 tuple(tensors), pullback)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def pullback(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        return (full,)

    return _make(a.values[idx], (a,), pullback)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def pullback(g):
        return (g.reshape(old),)

    return _make(a.values.reshape(shape), (a,), pullback)


def _check_index(index: np.ndarray, n: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"{op} index out of range [0, {n})")
    return index


def gather_nodes(nodes: Tensor, index) -> Tensor:
    """Row lookup: out[e] = nodes[index[e]]; backward scatter-adds."""
    nodes = _as_tensor(nodes)
    index = _check_index(index, nodes.shape[0], "gather_nodes")

    def pullback(g):
        acc = np.zeros_like(nodes.values)
        np.add.at(acc, index, g)
        return (acc,)

    return _make(nodes.values[index], (nodes,), pullback)


def segment_sum(edges: Tensor, dest_index, n_segments: int) -> Tensor:
    """out[n] = sum of edge rows with dest_index == n; empty segments are
    zero rows."""
    edges = _as_tensor(edges)
    index = _check_index(dest_index, n_segments, "segment_sum")
    out = np.zeros((n_segments,) + edges.shape[1:])
    np.add.at(out, index, edges.values)

    def pullback(g):
        return (g[index],)

    return _make(out, (edges,), pullback)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def pullback(g):
        return (np.full(a.shape, float(g)),)

    return _make(np.asarray(a.values.sum()), (a,), pullback)


def smooth_l1(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean over elements of the Huber-style loss:
    0.5*d^2/delta if |d| < delta else |d| - 0.5*delta, d = pred - target."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes incompatible: {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise ShapeError(f"smooth_l1 delta must be > 0, got {delta}")
    d = pred.values - target.values
    absd = np.abs(d)
    quad = absd < delta
    losses = np.where(quad, 0.5 * d * d / delta, absd - 0.5 * delta)
    n = max(d.size, 1)

    def pullback(g):
        dd = np.where(quad, d / delta, np.sign(d)) * (float(g) / n)
        return dd, -dd

    return _make(np.asarray(losses.sum() / n), (pred, target), pullback)


class Tape:
    """Topologically ordered record of the ops above a scalar root."""

    def __init__(self, root: Tensor):
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
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        self.order = order  # parents precede children
        self.root = root

    def gradients(self) -> dict[int, np.ndarray]:
        """Map id(tensor) -> accumulated gradient; each node visited once."""
        grads: dict[int, np.ndarray] = {id(self.root): np.ones(self.root.shape)}
        for node in reversed(self.order):
            g = grads.get(id(node))
            if g is None or node._pullback is None:
                continue
            for parent, pg in zip(node._parents, node._pullback(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named parameter.

    Parameters not on the path to the loss get exact zero gradients.
    """
    if loss.shape != ():
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = Tape(loss).gradients()
    return {
        name: grads.get(id(p), np.zeros(p.shape))
        for name, p in params.items()
    }


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, Tensor], h: float = 1e-5) -> float:
    """Max discrepancy between analytic and central-difference gradients.

    Per element the discrepancy is |analytic - fd| / max(1, |analytic|,
    |fd|): relative for large gradients, absolute near zero.
    """
    analytic = backward(f(params), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.values.ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(params).item()
            flat[i] = orig - h
            lo = f(params).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
        a = analytic[name].ravel()
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        worst = max(worst, float((np.abs(a - fd) / denom).max()))
    return worst
