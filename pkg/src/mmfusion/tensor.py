"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records a closure that pushes the upstream gradient to its
parents; ``backward`` walks the graph in reverse topological order.
Gradients accumulate additively, so callers zero them between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

RMS_EPS = 1e-5


class DimensionError(ValueError):
    pass


class Rng:
    """Seeded generator: numpy's Philox4x64 counter-based bit generator.

    Gaussian draws use Box-Muller over its uniforms, so initialization is
    defined by the uniform stream alone.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        out = mean + std * z[:n]
        return out.reshape(shape) if shape else float(out[0])

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar; the functional ops below are the real API
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output; ``backward(g)`` must accumulate into parents."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _push(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t._accumulate(_unbroadcast(g, t.shape))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _push(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _push(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return make_node(out, (a, b), backward)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _push(a, g)
        _push(b, g)

    return make_node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _push(a, g * b.data)
        if b.requires_grad:
            _push(b, g * a.data)

    return make_node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: _push(a, g * c))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_node(s, (a,), lambda g: _push(a, g * s * (1.0 - s)))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    x = a.data
    return make_node(x * s, (a,), lambda g: _push(a, g * (s + x * s * (1.0 - s))))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: _push(a, g * (1.0 - t * t)))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: _push(a, g / a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: _push(a, g * inside))


POINTWISE = {"silu": silu, "tanh": tanh, "sigmoid": sigmoid}


def pointwise(a: Tensor, f: str, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: silu, tanh, sigmoid (unary); add, mul (binary); scale."""
    if f in POINTWISE:
        return POINTWISE[f](a)
    if f in ("add", "mul"):
        b = _wrap(b)
        if a.shape != b.shape:
            raise DimensionError(f"{f} shape mismatch: {a.shape} vs {b.shape}")
        return add(a, b) if f == "add" else mul(a, b)
    if f == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown pointwise op {f!r}")


def softmax_last(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("softmax input is not finite")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _push(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return make_node(s, (a,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm gain {gain.shape} does not match width {d}")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def backward(g):
        if gain.requires_grad:
            _push(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _push(x, inv * (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return make_node(xhat * gain.data, (x, gain), backward)


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: _push(x, g * mask))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: _push(a, g.reshape(old)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,),
                     lambda g: _push(a, np.transpose(g, inv)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _push(t, part)

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        _push(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return make_node(out, (a,), backward)


def total(a: Tensor) -> Tensor:
    return make_node(np.array(a.data.sum()), (a,),
                     lambda g: _push(a, np.broadcast_to(g, a.shape)))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return make_node(table.data[ids], (table,), backward)


def gather_cols(table: Tensor, ids: np.ndarray) -> Tensor:
    """Columns of a 2-D tensor as rows: result[..., :] = table[:, id]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
        raise IndexError(f"id out of range for table with {table.shape[1]} columns")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt.T, ids.reshape(-1), g.reshape(-1, table.shape[0]))
            table._accumulate(gt)

    return make_node(np.moveaxis(table.data[:, ids], 0, -1), (table,), backward)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring grad")
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def grad_check(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, tol: float = 1e-4,
               n_samples: int | None = None, rng: Rng | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff grad of scalar ``f()`` w.r.t. ``x`` with central differences.

    ``f`` is re-evaluated after in-place perturbation of ``x.data``. The
    relative error denominator is max(|analytic|, |numeric|, floor) so that
    near-zero gradients are judged on absolute error.
    """
    x.data = np.ascontiguousarray(x.data)  # the flat view below must alias x.data
    x.grad = None
    out = f()
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if n_samples is not None and n_samples < flat.size:
        idx = (rng or Rng(0)).permutation(flat.size)[:n_samples]
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f().data)
        flat[i] = orig - step
        lo = float(f().data)
        flat[i] = orig
        num = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return GradCheckReport(worst, tol, len(idx))


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
