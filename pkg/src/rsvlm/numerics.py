"""Deterministic dense linear algebra, attention primitive, PRNG, and
finite-difference gradient oracles.

Matrices are plain 2-D numpy arrays in row-major (C) order. Oracle and test
paths run at float64; no silent broadcasting is performed by the public
operations here, shape mismatches raise ShapeError naming both shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError

Matrix = np.ndarray

# splitmix64 constants
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def _check_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    return m


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op} produced non-finite entries")
    return out


def matmul(a, b) -> Matrix:
    """Matrix product of two 2-D arrays; raises ShapeError on inner-dim mismatch."""
    a = _check_matrix(a, "a")
    b = _check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    return _check_finite(a @ b, "matmul")


def softmax_rows(m) -> Matrix:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = _check_matrix(m, "m")
    if m.size == 0:
        raise ShapeError(f"softmax_rows: empty input of shape {m.shape}")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _check_finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


def scaled_dot_attention(q, k, v) -> Matrix:
    """softmax(q k^T / sqrt(q.cols)) v for single-head row-token matrices."""
    q = _check_matrix(q, "q")
    k = _check_matrix(k, "k")
    v = _check_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: q/k feature dims disagree, {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: k/v row counts disagree, {k.shape} vs {v.shape}")
    weights = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return _check_finite(weights @ v, "scaled_dot_attention")


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two nonzero vectors, clipped into [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: length mismatch, {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine: zero-norm input")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Runs entirely at float64. This is the independent oracle every analytic
    gradient in the package is checked against; it never shares code with the
    backward passes it validates.
    """
    if eps <= 0:
        raise DomainError(f"finite_diff_gradient: eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"finite_diff_gradient: non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# Relative error floor: coordinates whose analytic and numeric gradients are
# both below this magnitude are compared absolutely at floor * tolerance,
# which keeps finite-difference noise on structurally-zero gradients from
# registering as disagreement.
REL_ERROR_FLOOR = 1e-2


@dataclass
class GradReport:
    """Worst-case disagreement between analytic and numeric gradients."""

    max_relative_error: float
    worst_parameter_index: tuple
    analytic: float
    numeric: float

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol


def relative_error(analytic: float, numeric: float, floor: float = REL_ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def compare_gradients(analytic, numeric, floor: float = REL_ERROR_FLOOR) -> GradReport:
    """Elementwise relative comparison of two gradient arrays of equal shape."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"compare_gradients: shape mismatch, {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    rel = np.abs(a - n) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else (0,)
    return GradReport(
        max_relative_error=float(rel.max()) if rel.size else 0.0,
        worst_parameter_index=worst,
        analytic=float(a[worst]) if rel.size else 0.0,
        numeric=float(n[worst]) if rel.size else 0.0,
    )


def _mix64(z: int) -> int:
    """splitmix64 output function on one 64-bit word (pure-int reference)."""
    z &= _MASK64
    z = (z ^ (z >> 30)) * _MIX1 & _MASK64
    z = (z ^ (z >> 27)) * _MIX2 & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Counter-based splitmix64 generator; same seed gives a bit-identical
    stream on every platform.

    Draw i (1-based) is produced from the word ``s_i = seed + i * 0x9E3779B97F4A7C15
    (mod 2^64)`` passed through the splitmix64 mix::

        z = s_i
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2^64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2^64)
        output = z ^ (z >> 31)

    Uniform doubles take the top 53 bits (exact power-of-two scaling); normals
    use the Box-Muller transform on consecutive uniform pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._count = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = (np.uint64(self.seed) + np.uint64(_GOLDEN) * idx)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def _uniform_open(self, n: int) -> np.ndarray:
        """n doubles in (0, 1], safe to pass through log."""
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if np.isscalar(shape):
            shape = (int(shape),)
        size = int(np.prod(shape)) if len(shape) else 1
        m = (size + 1) // 2
        u1 = self._uniform_open(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:size]
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n) driven by the u64 stream."""
        draws = self.u64(max(n - 1, 0))
        order = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream for component `tag` of the same master seed."""
        return Rng(_mix64(self.seed ^ _mix64((_GOLDEN * (int(tag) + 1)) & _MASK64)))
