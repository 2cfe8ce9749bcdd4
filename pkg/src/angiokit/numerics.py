"""Deterministic numeric substrate: validated dense arrays, a counter-based
RNG, masked softmax, cosine similarity, and a central-difference gradient
checker.

All engine math runs in 64-bit floats; gradient checks are meaningless in
half precision.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ValidationError

_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step. Pure integer math, identical on every platform."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def _mix_tag(state: int, tag) -> int:
    if isinstance(tag, str):
        h = 0
        for b in tag.encode("utf-8"):
            h = splitmix64(h ^ b)
        tag = h
    return splitmix64(state ^ splitmix64(int(tag) & _M64))


class Rng:
    """Seeded counter-based generator (Philox4x32-10 keyed by a 64-bit seed).

    Identical seeds produce bit-identical streams across platforms and runs.
    ``derive(*tags)`` yields an independent child stream keyed by splitmix64
    mixing of the tags, so per-item streams match between serial and parallel
    execution regardless of consumption order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, *tags) -> "Rng":
        state = self.seed
        for tag in tags:
            state = _mix_tag(state, tag)
        return Rng(state)

    # Thin delegates; keep call sites short.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


def require_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries", code="non_finite")
    return arr


def dense_matrix(rows: int, cols: int, data: Sequence[float]) -> np.ndarray:
    """Validated row-major float64 matrix. Rejects NaN/Inf and size mismatch."""
    if rows < 0 or cols < 0:
        raise ValidationError("matrix dimensions must be non-negative")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != rows * cols:
        raise ValidationError(
            f"matrix data length {flat.size} != rows*cols {rows * cols}"
        )
    return require_finite(np.ascontiguousarray(flat.reshape(rows, cols)), "matrix")


def softmax(v: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Numerically stable softmax; masked-out entries get exactly 0 weight."""
    v = require_finite(v, "softmax input")
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("degenerate softmax", code="degenerate_softmax")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ValidationError("softmax mask length mismatch")
        if not mask.any():
            raise ValidationError("degenerate softmax", code="degenerate_softmax")
    else:
        mask = np.ones_like(v, dtype=bool)
    shifted = v - np.max(v[mask])
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    return e / e.sum()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = require_finite(a, "cosine input a").reshape(-1)
    b = require_finite(b, "cosine input b").reshape(-1)
    if a.size != b.size:
        raise ValidationError("cosine similarity length mismatch")
    na2 = float(a @ a)
    nb2 = float(b @ b)
    if na2 == 0.0 or nb2 == 0.0:
        raise ValidationError("zero vector", code="zero_vector")
    return float(np.clip(float(a @ b) / np.sqrt(na2 * nb2), -1.0, 1.0))


def l2_normalize_rows(x: np.ndarray, name: str = "rows") -> np.ndarray:
    x = require_finite(x, name)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("zero vector", code="zero_vector")
    return x / norms


def finite_diff_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f(params)`` must return ``(value, gradient)``. Error per coordinate is
    ``|analytic - central| / max(1, |central|)``; the maximum over coordinates
    is returned.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"eps {eps} outside [1e-7, 1e-3]")
    params = require_finite(params, "params").reshape(-1).copy()
    value, grad = f(params)
    if not np.isfinite(value):
        raise ValidationError("non-finite objective", code="non_finite_objective")
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.size != params.size:
        raise ValidationError("gradient length mismatch")
    worst = 0.0
    for i in range(params.size):
        p = params.copy()
        p[i] += eps
        up, _ = f(p)
        p[i] -= 2 * eps
        dn, _ = f(p)
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise ValidationError("non-finite objective", code="non_finite_objective")
        central = (up - dn) / (2 * eps)
        err = abs(grad[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
