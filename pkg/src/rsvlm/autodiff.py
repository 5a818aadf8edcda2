"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every trainable module in the package builds its forward pass from the ops
below, so one backward implementation serves the whole model. The engine is
deliberately small: 2-D values (plus scalars), no views of mutable state, no
in-place graph mutation, fully deterministic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .numerics import GradReport, REL_ERROR_FLOOR, Rng, relative_error


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the whole graph."""
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return Tensor(-a.value, parents=(a,), backward=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(out, parents=(a, b), backward=bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return Tensor(a.value * c, parents=(a,), backward=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return Tensor(out, parents=(a, b), backward=bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g.T)

    return Tensor(a.value.T, parents=(a,), backward=bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(sl)])
            offset += size

    return Tensor(out, parents=tuple(tensors), backward=bw)


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + size > a.value.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}, {start + size}) out of range for axis {axis} of {a.value.shape}"
        )
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)
    out = a.value[sl]

    def bw(g):
        full = np.zeros_like(a.value)
        full[sl] = g
        _accumulate(a, full)

    return Tensor(out, parents=(a,), backward=bw)


def softmax_rows(a: Tensor) -> Tensor:
    x = a.value
    y = np.exp(x - x.max(axis=1, keepdims=True))
    y /= y.sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return Tensor(y, parents=(a,), backward=bw)


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization without learned affine parameters."""
    x = a.value
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gy))

    return Tensor(y, parents=(a,), backward=bw)


def silu(a: Tensor) -> Tensor:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    y = x * sig

    def bw(g):
        _accumulate(a, g * sig * (1.0 + x * (1.0 - sig)))

    return Tensor(y, parents=(a,), backward=bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return Tensor(y, parents=(a,), backward=bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)

    def bw(g):
        _accumulate(a, g * y)

    return Tensor(y, parents=(a,), backward=bw)


def l2_normalize_rows(a: Tensor) -> Tensor:
    x = a.value
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("l2_normalize_rows: zero-norm row")
    y = x / norms

    def bw(g):
        _accumulate(a, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    return Tensor(y, parents=(a,), backward=bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.value.shape[0]} rows")
    out = table.value[ids]

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return Tensor(out, parents=(table,), backward=bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the rows whose target id is >= 0."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.value.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets length {targets.shape} misaligned with logits {logits.value.shape}"
        )
    sel = np.nonzero(targets >= 0)[0]
    if sel.size == 0:
        raise ShapeError("cross_entropy: no supervised positions")
    rows = logits.value[sel]
    tgt = targets[sel]
    if tgt.max() >= rows.shape[1]:
        raise ShapeError(f"cross_entropy: target id exceeds vocab {rows.shape[1]}")
    mx = rows.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(rows - mx).sum(axis=1))
    picked = rows[np.arange(sel.size), tgt]
    out = np.array((lse - picked).mean())

    def bw(g):
        p = np.exp(rows - mx)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(sel.size), tgt] -= 1.0
        full = np.zeros_like(logits.value)
        full[sel] = p * (float(g) / sel.size)
        _accumulate(logits, full)

    return Tensor(out, parents=(logits,), backward=bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.full_like(a.value, float(g)))

    return Tensor(np.array(a.value.sum()), parents=(a,), backward=bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size

    def bw(g):
        _accumulate(a, np.full_like(a.value, float(g) / n))

    return Tensor(np.array(a.value.mean()), parents=(a,), backward=bw)


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[tuple],
    *,
    n_probes: int = 200,
    rng: Rng | None = None,
    eps: float = 1e-5,
    floor: float = REL_ERROR_FLOOR,
) -> GradReport:
    """Probe analytic gradients of named parameters against central differences.

    `build_loss` must rebuild the scalar loss graph from the parameters'
    current values. Every parameter receives at least one probe; remaining
    probes are spread uniformly over all coordinates.
    """
    params = [(name, t) for name, t in params]
    rng = rng or Rng(0)
    zero_grads(t for _, t in params)
    loss = build_loss()
    backward(loss)
    analytic = {name: (np.zeros_like(t.value) if t.grad is None else t.grad.copy()) for name, t in params}

    sizes = [t.value.size for _, t in params]
    total = sum(sizes)
    probes = []
    for pi, (name, t) in enumerate(params):
        probes.append((pi, int(rng.u64(1)[0] % np.uint64(sizes[pi]))))
    extra = max(n_probes - len(probes), 0)
    if extra:
        offsets = np.cumsum([0] + sizes)
        flat_picks = rng.u64(extra) % np.uint64(total)
        for pick in flat_picks.tolist():
            pi = int(np.searchsorted(offsets, pick, side="right")) - 1
            probes.append((pi, int(pick - offsets[pi])))

    worst = GradReport(0.0, ("", 0), 0.0, 0.0)
    for pi, flat_idx in probes:
        name, t = params[pi]
        buf = t.value.reshape(-1)
        orig = buf[flat_idx]
        buf[flat_idx] = orig + eps
        fp = float(build_loss().value)
        buf[flat_idx] = orig - eps
        fm = float(build_loss().value)
        buf[flat_idx] = orig
        numeric = (fp - fm) / (2.0 * eps)
        ana = float(analytic[name].reshape(-1)[flat_idx])
        err = relative_error(ana, numeric, floor)
        if err >= worst.max_relative_error:
            idx = np.unravel_index(flat_idx, t.value.shape)
            worst = GradReport(err, (name,) + tuple(int(i) for i in idx), ana, numeric)
    return worst
