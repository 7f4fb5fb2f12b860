"""Dense float64 numerics: activations with derivatives, seeded RNG, and
small matrix utilities shared by every other module.

All arithmetic is 64-bit; the finite-difference gradient checks elsewhere in
the package are not feasible in single precision.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


class Rng:
    """Seeded random source (PCG64). Identical seeds give identical draw
    sequences across runs and platforms."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset: int) -> "Rng":
        """Independent stream derived from this seed, for per-repeat reseeding."""
        return Rng(self.seed + int(offset))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} x {v.shape}")
    return m @ v


def sigmoid(v):
    return expit(np.asarray(v, dtype=np.float64))


def sigmoid_deriv(v):
    s = sigmoid(v)
    return s * (1.0 - s)


def tanh_act(v):
    return np.tanh(np.asarray(v, dtype=np.float64))


def tanh_deriv(v):
    t = np.tanh(np.asarray(v, dtype=np.float64))
    return 1.0 - t * t


def identity_act(v):
    return np.asarray(v, dtype=np.float64)


def identity_deriv(v):
    return np.ones_like(np.asarray(v, dtype=np.float64))


# activation id -> (function, derivative)
ACTIVATIONS = {
    "tanh": (tanh_act, tanh_deriv),
    "sigmoid": (sigmoid, sigmoid_deriv),
    "identity": (identity_act, identity_deriv),
}


def gaussian(rng: Rng, length: int) -> np.ndarray:
    """``length`` independent standard-normal draws, reproducible per seed."""
    if length <= 0:
        raise ValueError(f"gaussian: length must be positive, got {length}")
    return rng.gen.standard_normal(length)


def uniform_init(rng: Rng, out_dim: int, in_dim: int) -> np.ndarray:
    """Weight matrix init: uniform in [-s, s] with s = 1/sqrt(fan_in)."""
    s = 1.0 / np.sqrt(in_dim)
    return rng.gen.uniform(-s, s, size=(out_dim, in_dim))


def spectral_radius_est(m: np.ndarray, iters: int) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"spectral_radius_est: matrix must be square, got {m.shape}")
    if iters < 1:
        raise ValueError("spectral_radius_est: iters must be >= 1")
    n = m.shape[0]
    # deterministic start vector, unlikely to be orthogonal to the dominant mode
    v = np.linspace(1.0, 2.0, n)
    est = 0.0
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        est = norm / np.linalg.norm(v)
        v = w / norm
    return float(est)


def scale_to_spectral_radius(m: np.ndarray, target: float) -> np.ndarray:
    """Rescale a square matrix so its exact spectral radius equals ``target``.

    Uses a dense eigendecomposition; meant for test/diagnostic construction,
    not for the power-iteration estimator above.
    """
    m = np.asarray(m, dtype=np.float64)
    rho = np.max(np.abs(np.linalg.eigvals(m)))
    if rho == 0.0:
        raise ValueError("cannot rescale a nilpotent/zero matrix to a target radius")
    return m * (target / rho)


def operator_norm(m: np.ndarray) -> float:
    """Largest singular value (operator 2-norm)."""
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64), ord=2))
