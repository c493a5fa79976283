"""Small dense linear algebra helpers, seeded random streams and
finite-difference oracles.

Vectors and matrices are plain float64 numpy arrays; the helpers here only
add the conformability and finiteness checks the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ConformabilityError(ValueError):
    """Operand shapes do not line up."""


class NumericalError(ArithmeticError):
    """A function evaluation produced a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ConformabilityError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def matvec(m, v) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = as_vector(v)
    if m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise ConformabilityError(f"cannot multiply {m.shape} by vector of length {v.shape[0]}")
    return m @ v


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, key)``.

    ``key`` is a tuple of non-negative integers; child streams append to it, so
    the stream for block ``(i, j)`` of experiment ``seed`` is
    ``RngStream(seed).spawn(i, j)`` no matter which worker asks for it.
    """

    seed: int
    key: tuple[int, ...] = field(default=())

    def spawn(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    @property
    def stream_id(self) -> int:
        # 64-bit digest of the key path, handy for logging
        ss = np.random.SeedSequence(0, spawn_key=self.key)
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class EigEstimate:
    value: float
    degenerate: bool
    iterations: int


def power_iteration_max_eig(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = 100,
    rng: RngStream | None = None,
    tol: float = 0.0,
) -> EigEstimate:
    """Largest absolute eigenvalue of a symmetric linear operator.

    Uses ``||A v||`` for a unit iterate ``v``, which converges to
    ``|lambda_max|`` even when ``lambda_max`` and ``-lambda_max`` are both
    eigenvalues. Stops early once successive estimates differ by less than
    ``tol`` (relative); ``tol=0`` always runs ``iters`` steps.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    gen = (rng or RngStream(0)).generator()
    v = gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for k in range(1, iters + 1):
        av = np.asarray(apply(v), dtype=np.float64)
        norm = float(np.linalg.norm(av))
        if not np.isfinite(norm):
            raise NumericalError("operator produced a non-finite vector", index=k)
        if norm == 0.0:
            return EigEstimate(0.0, True, k)
        if tol > 0 and abs(norm - est) <= tol * norm:
            return EigEstimate(norm, False, k)
        est = norm
        v = av / norm
    return EigEstimate(est, False, iters)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float | None = None) -> np.ndarray:
    """Central-difference gradient.

    With ``h=None`` the step for coordinate k is ``1e-5 * (1 + |x_k|)``.
    """
    x = as_vector(x).copy()
    if h is not None and h <= 0:
        raise ValueError("step size must be positive")
    out = np.empty_like(x)
    for k in range(x.size):
        step = h if h is not None else 1e-5 * (1.0 + abs(x[k]))
        orig = x[k]
        x[k] = orig + step
        fp = float(f(x))
        x[k] = orig - step
        fm = float(f(x))
        x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {k}", index=k)
        out[k] = (fp - fm) / (2.0 * step)
    return out


def rel_err(a, b) -> float:
    """Relative L2 error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    return float(diff if denom == 0 else diff / denom)
