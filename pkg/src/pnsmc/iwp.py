"""Discrete transitions of the integrated Wiener process prior.

The augmented state stacks ``q + 1`` blocks of length ``d`` in block-major
order: the signal, its first derivative, ..., its q-th derivative.  Entry
``(block b, component i)`` sits at flat index ``b * d + i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

MAX_Q = 4


@dataclass(frozen=True)
class StateLayout:
    d: int
    q: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.q < 0:
            raise ValueError(f"q must be >= 0, got {self.q}")

    @property
    def n_blocks(self) -> int:
        return self.q + 1

    @property
    def dim(self) -> int:
        return self.d * (self.q + 1)

    def index(self, block: int, component: int) -> int:
        if not (0 <= block <= self.q and 0 <= component < self.d):
            raise IndexError(f"block {block} / component {component} outside layout {self}")
        return block * self.d + component


@dataclass(frozen=True)
class GaussMarkovTransition:
    """``X_{t+h} | X_t ~ N(A X_t + xi, Q)`` with ``Q = Q_sqrt.T @ Q_sqrt``."""

    h: float
    A: np.ndarray
    xi: np.ndarray
    Q: np.ndarray
    Q_sqrt: np.ndarray


def _check_h(h: float) -> float:
    h = float(h)
    if not h >= 0.0:
        raise ValueError(f"step size must be non-negative, got {h}")
    return h


@lru_cache(maxsize=256)
def unit_transition(h: float, q: int) -> np.ndarray:
    """``A1(h)`` for a scalar signal: ``A1[i, j] = h**(j-i) / (j-i)!`` for ``i <= j``."""
    h = _check_h(h)
    n = q + 1
    A = np.zeros((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            A[i - 1, j - 1] = h ** (j - i) / factorial(j - i)
    A.setflags(write=False)
    return A


@lru_cache(maxsize=256)
def unit_process_noise(h: float, q: int) -> np.ndarray:
    """``Q1(h)`` for a scalar signal with unit diffusion (1-based formula)."""
    h = _check_h(h)
    n = q + 1
    Q = np.zeros((n, n))
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            p = 2 * q + 3 - i - j
            Q[i - 1, j - 1] = h**p / (p * factorial(q + 1 - i) * factorial(q + 1 - j))
    Q.setflags(write=False)
    return Q


@lru_cache(maxsize=256)
def unit_process_noise_sqrt(h: float, q: int) -> np.ndarray:
    """Upper-triangular ``U`` with ``U.T @ U == Q1(h)``.

    ``Q1(h) = T Q1(1) T`` with ``T = diag(h**(q - a + 1/2))`` (0-based ``a``), so
    the factor is ``chol(Q1(1)).T @ T``; this stays exact for tiny ``h`` where a
    direct Cholesky of ``Q1(h)`` would fail.
    """
    h = _check_h(h)
    U1 = np.linalg.cholesky(unit_process_noise(1.0, q)).T
    scale = np.array([h ** (q - a + 0.5) for a in range(q + 1)])
    U = U1 * scale[None, :]
    U.setflags(write=False)
    return U


def _gamma_diag(gamma, d: int) -> np.ndarray:
    g = np.asarray(gamma, dtype=float)
    if g.ndim == 2:
        if g.shape != (d, d):
            raise ValueError(f"Gamma must be {d}x{d}, got {g.shape}")
        if np.any(g - np.diag(np.diag(g))):
            raise ValueError("Gamma must be diagonal")
        g = np.diag(g)
    g = np.broadcast_to(g, (d,)).astype(float)
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("Gamma entries must be finite and non-negative")
    return g


def build_transition(h: float, layout: StateLayout, gamma=1.0) -> GaussMarkovTransition:
    """Transition of IWP(q) over ``d`` signals with diffusion ``Gamma`` (diagonal).

    ``A = A1(h) kron I_d`` and ``Q = Q1(h) kron Gamma``.  ``gamma`` may be a
    scalar, a length-``d`` vector of diagonal entries or a diagonal matrix.
    """
    h = _check_h(h)
    g = _gamma_diag(gamma, layout.d)
    eye = np.eye(layout.d)
    A = np.kron(unit_transition(h, layout.q), eye)
    Q = np.kron(unit_process_noise(h, layout.q), np.diag(g))
    Q_sqrt = np.kron(unit_process_noise_sqrt(h, layout.q), np.diag(np.sqrt(g)))
    return GaussMarkovTransition(h, A, np.zeros(layout.dim), Q, Q_sqrt)


def process_noise_sqrt_batch(h: float, layout: StateLayout, sqrt_gamma: np.ndarray) -> np.ndarray:
    """Factors of ``Q1(h) kron diag(g)`` for a batch of ``sqrt(g)``, shape ``(..., d)``."""
    base = np.kron(unit_process_noise_sqrt(h, layout.q), np.eye(layout.d))
    cols = np.tile(sqrt_gamma, layout.n_blocks)
    return base * cols[..., None, :]


def projections(layout: StateLayout) -> tuple[np.ndarray, np.ndarray]:
    """Selectors ``(C, Cdot)`` picking the signal block and its derivative block."""
    if layout.q < 1:
        raise ValueError("projections need q >= 1 (no derivative block when q == 0)")
    C = np.zeros((layout.d, layout.dim))
    Cdot = np.zeros((layout.d, layout.dim))
    C[:, : layout.d] = np.eye(layout.d)
    Cdot[:, layout.d : 2 * layout.d] = np.eye(layout.d)
    return C, Cdot
